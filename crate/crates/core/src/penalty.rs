//! SCAD and adaptive-lasso penalties, their derivatives and LQA weights.
//!
//! Penalties act on the slope coefficients only; the incidence intercept and
//! the random effects are never penalized.

use nalgebra::DVector;

use crate::error::{Error, Result};

pub const DEFAULT_SCAD_A: f64 = 3.7;
pub const DEFAULT_WEIGHT_FLOOR: f64 = 1e-8;
pub const DEFAULT_LQA_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PenaltyKind {
    None,
    AdaptiveLasso,
    Scad,
}

impl std::fmt::Display for PenaltyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PenaltyKind::None => "none",
            PenaltyKind::AdaptiveLasso => "alasso",
            PenaltyKind::Scad => "scad",
        })
    }
}

impl std::str::FromStr for PenaltyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(PenaltyKind::None),
            "alasso" | "adaptive_lasso" | "adaptive-lasso" => Ok(PenaltyKind::AdaptiveLasso),
            "scad" => Ok(PenaltyKind::Scad),
            other => Err(Error::config("penalty", format!("expected none|alasso|scad, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Submodel {
    Incidence,
    Latency,
}

impl Submodel {
    pub fn as_str(self) -> &'static str {
        match self {
            Submodel::Incidence => "incidence",
            Submodel::Latency => "latency",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PenaltySpec {
    pub kind: PenaltyKind,
    pub kappa1: f64,
    pub kappa2: f64,
    pub scad_a: f64,
    /// One weight per incidence slope (intercept excluded).
    pub weights_alpha: DVector<f64>,
    pub weights_beta: DVector<f64>,
    pub weight_floor: f64,
}

impl PenaltySpec {
    /// Unit weights; suitable for SCAD and for `None`.
    pub fn new(kind: PenaltyKind, d: usize, p: usize) -> Self {
        Self {
            kind,
            kappa1: 0.0,
            kappa2: 0.0,
            scad_a: DEFAULT_SCAD_A,
            weights_alpha: DVector::from_element(d, 1.0),
            weights_beta: DVector::from_element(p, 1.0),
            weight_floor: DEFAULT_WEIGHT_FLOOR,
        }
    }

    pub fn with_kappa(mut self, kappa1: f64, kappa2: f64) -> Self {
        self.kappa1 = kappa1;
        self.kappa2 = kappa2;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa1 >= 0.0 && self.kappa2 >= 0.0) {
            return Err(Error::config("kappa", "tuning parameters must be nonnegative"));
        }
        if !(self.scad_a > 2.0) {
            return Err(Error::config("scad_a", format!("must exceed 2, got {}", self.scad_a)));
        }
        if self
            .weights_alpha
            .iter()
            .chain(self.weights_beta.iter())
            .any(|w| !(*w > 0.0 && w.is_finite()))
        {
            return Err(Error::config("weights", "adaptive weights must be positive and finite"));
        }
        Ok(())
    }

    pub fn kappa(&self, which: Submodel) -> f64 {
        match which {
            Submodel::Incidence => self.kappa1,
            Submodel::Latency => self.kappa2,
        }
    }

    pub fn weights(&self, which: Submodel) -> &DVector<f64> {
        match which {
            Submodel::Incidence => &self.weights_alpha,
            Submodel::Latency => &self.weights_beta,
        }
    }
}

/// `w_j = 1 / max(|coef_j|, eps)`; `alpha_tilde[0]` is the intercept and gets
/// no weight.
pub fn alasso_weights(alpha_tilde: &DVector<f64>, beta_tilde: &DVector<f64>, eps: f64) -> (DVector<f64>, DVector<f64>) {
    let w = |v: f64| 1.0 / v.abs().max(eps);
    let wa = DVector::from_iterator(alpha_tilde.len().saturating_sub(1), alpha_tilde.iter().skip(1).map(|&v| w(v)));
    let wb = beta_tilde.map(w);
    (wa, wb)
}

/// SCAD penalty of `|coef|` at level `kappa`.
pub fn scad_value(abs: f64, kappa: f64, a: f64) -> f64 {
    if abs <= kappa {
        kappa * abs
    } else if abs <= a * kappa {
        ((a * a - 1.0) * kappa * kappa - (abs - a * kappa).powi(2)) / (2.0 * (a - 1.0))
    } else {
        (a + 1.0) * kappa * kappa / 2.0
    }
}

/// Right derivative of [`scad_value`] in `|coef|`.
pub fn scad_derivative(abs: f64, kappa: f64, a: f64) -> f64 {
    if abs <= kappa {
        kappa
    } else if abs <= a * kappa {
        (a * kappa - abs) / (a - 1.0)
    } else {
        0.0
    }
}

/// Penalty on slope `index` (0-based, intercept excluded) of `which`.
pub fn penalty_value(spec: &PenaltySpec, coef: f64, which: Submodel, index: usize) -> f64 {
    let kappa = spec.kappa(which);
    match spec.kind {
        PenaltyKind::None => 0.0,
        PenaltyKind::AdaptiveLasso => kappa * spec.weights(which)[index] * coef.abs(),
        PenaltyKind::Scad => scad_value(coef.abs(), kappa, spec.scad_a),
    }
}

/// Derivative of [`penalty_value`] in `|coef|` (right derivative at 0).
pub fn penalty_derivative(spec: &PenaltySpec, coef: f64, which: Submodel, index: usize) -> f64 {
    let kappa = spec.kappa(which);
    match spec.kind {
        PenaltyKind::None => 0.0,
        PenaltyKind::AdaptiveLasso => kappa * spec.weights(which)[index],
        PenaltyKind::Scad => scad_derivative(coef.abs(), kappa, spec.scad_a),
    }
}

/// LQA coefficients `phi'(|w_j|) / max(|w_j|, eps)` for a block of slopes.
///
/// For the incidence block `coefs` includes the intercept at position 0,
/// whose entry is 0. Entries for zeroed coordinates are computed but unused.
pub fn lqa_diag(spec: &PenaltySpec, coefs: &DVector<f64>, which: Submodel, eps: f64) -> DVector<f64> {
    let offset = match which {
        Submodel::Incidence => 1,
        Submodel::Latency => 0,
    };
    DVector::from_fn(coefs.len(), |j, _| {
        if j < offset {
            0.0
        } else {
            let c = coefs[j];
            penalty_derivative(spec, c, which, j - offset) / c.abs().max(eps)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scad(k: f64) -> PenaltySpec {
        PenaltySpec::new(PenaltyKind::Scad, 1, 1).with_kappa(k, k)
    }

    #[test]
    fn weights_examples() {
        let (wa, wb) = alasso_weights(
            &DVector::from_vec(vec![9.0, 0.5, 0.0, -0.8]),
            &DVector::from_vec(vec![2.0]),
            1e-8,
        );
        assert_eq!(wa.len(), 3);
        assert!((wa[0] - 2.0).abs() < 1e-15);
        assert!((wa[1] - 1e8).abs() < 1e-3);
        assert!((wa[2] - 1.25).abs() < 1e-15);
        assert!((wb[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn scad_values() {
        let s = scad(1.0);
        assert!((penalty_value(&s, 0.5, Submodel::Incidence, 0) - 0.5).abs() < 1e-15);
        assert!((penalty_value(&s, -5.0, Submodel::Incidence, 0) - 2.35).abs() < 1e-14);
        assert!((scad_value(1.0, 1.0, 3.7) - 1.0).abs() < 1e-15);
        assert!((scad_value(1.0 + 1e-13, 1.0, 3.7) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scad_derivatives() {
        let s = scad(1.0);
        assert!((penalty_derivative(&s, 2.0, Submodel::Latency, 0) - 1.7 / 2.7).abs() < 1e-15);
        assert!((penalty_derivative(&s, 2.0, Submodel::Latency, 0) - 0.62963).abs() < 1e-5);
        assert_eq!(penalty_derivative(&s, 10.0, Submodel::Latency, 0), 0.0);
    }

    #[test]
    fn alasso_derivative_is_constant() {
        let mut s = PenaltySpec::new(PenaltyKind::AdaptiveLasso, 1, 1).with_kappa(0.5, 0.5);
        s.weights_alpha[0] = 2.0;
        for c in [0.01, -1.0, 7.0] {
            assert_eq!(penalty_derivative(&s, c, Submodel::Incidence, 0), 1.0);
        }
    }

    #[test]
    fn lqa_examples() {
        let s = PenaltySpec::new(PenaltyKind::AdaptiveLasso, 1, 1).with_kappa(1.0, 1.0);
        let d = lqa_diag(&s, &DVector::from_vec(vec![3.0, 0.5]), Submodel::Incidence, 1e-8);
        assert_eq!(d[0], 0.0);
        assert!((d[1] - 2.0).abs() < 1e-15);
        let d = lqa_diag(&scad(1.0), &DVector::from_vec(vec![10.0]), Submodel::Latency, 1e-8);
        assert_eq!(d[0], 0.0);
    }

    #[test]
    fn parse_kinds() {
        assert_eq!("SCAD".parse::<PenaltyKind>().unwrap(), PenaltyKind::Scad);
        assert!("ridge".parse::<PenaltyKind>().is_err());
    }
}

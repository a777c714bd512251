//! Random-effect covariance `D(theta)`: `theta * I_m` for a constant frailty,
//! or `theta * G(rho)` for a record-level AR(1) frailty.
//!
//! `G(rho)` is block diagonal with one stationary AR(1) block per subject,
//! `G_i = [rho^|j-k|] / (1 - rho^2)`. Its inverse is tridiagonal:
//! `G^{-1} = (1 + rho^2) I - rho J - rho^2 K`, with `J` the first sub- and
//! super-diagonal ones and `K` marking the first and last record of each
//! subject. A subject with a single record is both first and last, so its
//! `K` entry is 2, which gives the scalar `G_i^{-1} = 1 - rho^2`.

use nalgebra::{DMatrix, DVector};

/// Iterates `(start, len)` of each subject's block in canonical order.
fn blocks(sizes: &[usize]) -> impl Iterator<Item = (usize, usize)> + '_ {
    sizes.iter().scan(0usize, |start, &len| {
        let s = *start;
        *start += len;
        Some((s, len))
    })
}

/// Dense `G(rho)`.
pub fn ar1_g(sizes: &[usize], rho: f64) -> DMatrix<f64> {
    let n: usize = sizes.iter().sum();
    let mut g = DMatrix::zeros(n, n);
    let scale = 1.0 / (1.0 - rho * rho);
    for (s, len) in blocks(sizes) {
        for j in 0..len {
            for k in 0..len {
                g[(s + j, s + k)] = scale * rho.powi((j as i32 - k as i32).abs());
            }
        }
    }
    g
}

/// Dense banded `I`, `J`, `K` used by the REML equations.
pub fn ar1_ijk(sizes: &[usize]) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let n: usize = sizes.iter().sum();
    let i = DMatrix::identity(n, n);
    let mut j = DMatrix::zeros(n, n);
    let mut k = DMatrix::zeros(n, n);
    for (s, len) in blocks(sizes) {
        for t in 0..len.saturating_sub(1) {
            j[(s + t, s + t + 1)] = 1.0;
            j[(s + t + 1, s + t)] = 1.0;
        }
        k[(s, s)] += 1.0;
        k[(s + len - 1, s + len - 1)] += 1.0;
    }
    (i, j, k)
}

/// Dense `G(rho)^{-1}` from the banded form.
pub fn ar1_g_inv(sizes: &[usize], rho: f64) -> DMatrix<f64> {
    let (i, j, k) = ar1_ijk(sizes);
    i * (1.0 + rho * rho) - j * rho - k * (rho * rho)
}

/// `G(rho)^{-1} u` without forming `G`.
pub fn ar1_g_inv_mul(u: &DVector<f64>, sizes: &[usize], rho: f64) -> DVector<f64> {
    let mut out = DVector::zeros(u.len());
    let r2 = rho * rho;
    for (s, len) in blocks(sizes) {
        if len == 1 {
            out[s] = (1.0 - r2) * u[s];
            continue;
        }
        for t in 0..len {
            let diag = if t == 0 || t == len - 1 { 1.0 } else { 1.0 + r2 };
            let mut v = diag * u[s + t];
            if t > 0 {
                v -= rho * u[s + t - 1];
            }
            if t + 1 < len {
                v -= rho * u[s + t + 1];
            }
            out[s + t] = v;
        }
    }
    out
}

/// Adds `scale * G(rho)^{-1}` to the square block of `sigma` starting at
/// `offset`.
pub fn ar1_add_g_inv(sigma: &mut DMatrix<f64>, offset: usize, sizes: &[usize], rho: f64, scale: f64) {
    let r2 = rho * rho;
    for (s, len) in blocks(sizes) {
        let b = offset + s;
        if len == 1 {
            sigma[(b, b)] += scale * (1.0 - r2);
            continue;
        }
        for t in 0..len {
            let diag = if t == 0 || t == len - 1 { 1.0 } else { 1.0 + r2 };
            sigma[(b + t, b + t)] += scale * diag;
            if t + 1 < len {
                sigma[(b + t, b + t + 1)] -= scale * rho;
                sigma[(b + t + 1, b + t)] -= scale * rho;
            }
        }
    }
}

/// `log |G(rho)|`; each subject block contributes `-log(1 - rho^2)`.
pub fn ar1_log_det(n_subjects: usize, rho: f64) -> f64 {
    -(n_subjects as f64) * (1.0 - rho * rho).ln()
}

/// Traces of `I`, `J/2` and `K` against `X = Sigma*_{u,u} + u u^T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceCoefficients {
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
}

impl TraceCoefficients {
    /// From the within-subject diagonal and first off-diagonal of
    /// `Sigma*_{u,u}`, plus `u`. `diag[k]` is `Sigma*_{kk}`, `offdiag[k]` is
    /// `Sigma*_{k,k+1}` (ignored at subject boundaries).
    pub fn from_parts(diag: &[f64], offdiag: &[f64], u: &DVector<f64>, sizes: &[usize]) -> Self {
        let mut b1 = 0.0;
        let mut b2 = 0.0;
        let mut b3 = 0.0;
        for (s, len) in blocks(sizes) {
            for t in 0..len {
                let k = s + t;
                b1 += diag[k] + u[k] * u[k];
                if t + 1 < len {
                    b2 += offdiag[k] + u[k] * u[k + 1];
                }
            }
            let first = s;
            let last = s + len - 1;
            b3 += diag[first] + u[first] * u[first] + diag[last] + u[last] * u[last];
        }
        Self { b1, b2, b3 }
    }

    /// Dense evaluation, used as an independent check.
    pub fn from_dense(x: &DMatrix<f64>, sizes: &[usize]) -> Self {
        let (i, j, k) = ar1_ijk(sizes);
        Self {
            b1: (i * x).trace(),
            b2: 0.5 * (j * x).trace(),
            b3: (k * x).trace(),
        }
    }

    /// REML update `theta = n^{-1} {(1+rho^2) B1 - 2 rho B2 - rho^2 B3}`.
    pub fn theta(&self, n: usize, rho: f64) -> f64 {
        ((1.0 + rho * rho) * self.b1 - 2.0 * rho * self.b2 - rho * rho * self.b3) / n as f64
    }

    /// Coefficients `(A1, A2, A3, A4)` of the cubic whose root is the REML
    /// estimate of rho.
    pub fn cubic(&self, n: usize, m: usize) -> [f64; 4] {
        let (n, m) = (n as f64, m as f64);
        [
            (n - m) * (self.b1 - self.b3),
            (2.0 * m - n) * self.b2,
            n * self.b3 - (n + m) * self.b1,
            n * self.b2,
        ]
    }
}

pub fn cubic_eval(a: &[f64; 4], x: f64) -> f64 {
    ((a[0] * x + a[1]) * x + a[2]) * x + a[3]
}

pub fn cubic_deriv(a: &[f64; 4], x: f64) -> f64 {
    (3.0 * a[0] * x + 2.0 * a[1]) * x + a[2]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g_times_g_inv_is_identity() {
        let sizes = [1, 2, 3, 4, 5];
        for rho in [-0.9, -0.5, 0.0, 0.5, 0.9] {
            let prod = ar1_g(&sizes, rho) * ar1_g_inv(&sizes, rho);
            let err = (prod - DMatrix::identity(15, 15)).amax();
            assert!(err < 1e-10, "rho {rho}: {err}");
        }
    }

    #[test]
    fn log_det_matches_dense() {
        let sizes = [1, 3, 5, 2];
        for rho in [-0.7, 0.2, 0.85] {
            let g = ar1_g(&sizes, rho);
            let dense = g.determinant().ln();
            assert!((dense - ar1_log_det(sizes.len(), rho)).abs() < 1e-9);
        }
    }

    #[test]
    fn banded_multiply_matches_dense() {
        let sizes = [2, 1, 4];
        let u = DVector::from_vec(vec![0.3, -1.0, 2.0, 0.5, 0.1, -0.7, 1.1]);
        let rho = 0.35;
        let dense = ar1_g_inv(&sizes, rho) * &u;
        assert!((ar1_g_inv_mul(&u, &sizes, rho) - dense).amax() < 1e-14);
        let mut s = DMatrix::zeros(9, 9);
        ar1_add_g_inv(&mut s, 2, &sizes, rho, 2.0);
        let block = s.view((2, 2), (7, 7)).clone_owned();
        assert!((block - ar1_g_inv(&sizes, rho) * 2.0).amax() < 1e-14);
    }

    #[test]
    fn theta_at_rho_zero_is_plain_trace() {
        let sizes = [2, 3];
        let diag = [0.1, 0.2, 0.3, 0.4, 0.5];
        let off = [0.01, 0.0, 0.02, 0.03, 0.0];
        let u = DVector::from_vec(vec![1.0, -1.0, 0.5, 0.0, 2.0]);
        let b = TraceCoefficients::from_parts(&diag, &off, &u, &sizes);
        let plain = (diag.iter().sum::<f64>() + u.norm_squared()) / 5.0;
        assert!((b.theta(5, 0.0) - plain).abs() < 1e-14);
    }

    #[test]
    fn trace_parts_match_dense() {
        let sizes = [1, 2, 3];
        let x0 = DMatrix::from_fn(6, 6, |i, j| 1.0 / (1.0 + i as f64 + j as f64));
        let u = DVector::from_vec(vec![0.2, -0.4, 1.0, 0.3, -0.1, 0.6]);
        let diag: Vec<f64> = (0..6).map(|k| x0[(k, k)]).collect();
        let off: Vec<f64> = (0..6).map(|k| if k + 1 < 6 { x0[(k, k + 1)] } else { 0.0 }).collect();
        let parts = TraceCoefficients::from_parts(&diag, &off, &u, &sizes);
        let dense = TraceCoefficients::from_dense(&(x0 + &u * u.transpose()), &sizes);
        assert!((parts.b1 - dense.b1).abs() < 1e-14);
        assert!((parts.b2 - dense.b2).abs() < 1e-14);
        assert!((parts.b3 - dense.b3).abs() < 1e-14);
    }

    #[test]
    fn hand_two_record_subject() {
        // Sigma* = [[0.2, 0.05], [0.05, 0.3]], u = (1, 0.5)
        // X = [[1.2, 0.55], [0.55, 0.55]]
        // B1 = 1.75, B2 = 0.55, B3 = 1.2 + 0.55 = 1.75
        let b = TraceCoefficients::from_parts(
            &[0.2, 0.3],
            &[0.05, 0.0],
            &DVector::from_vec(vec![1.0, 0.5]),
            &[2],
        );
        assert!((b.b1 - 1.75).abs() < 1e-15);
        assert!((b.b2 - 0.55).abs() < 1e-15);
        assert!((b.b3 - 1.75).abs() < 1e-15);
        // rho = 0.5: (1.25*1.75 - 1.0*0.55 - 0.25*1.75) / 2 = 0.6
        assert!((b.theta(2, 0.5) - 0.6).abs() < 1e-14);
    }
}

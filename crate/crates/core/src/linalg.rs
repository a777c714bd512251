//! Dense Cholesky factorization and the few inverse-block quantities the
//! estimator needs. The dense inverse is never formed on the hot path.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// First ridge tried after a plain factorization fails; escalated by x10.
pub const RIDGE_START: f64 = 1e-8;
/// Largest ridge before giving up.
pub const RIDGE_MAX: f64 = 1e-2;

/// Lower Cholesky factor `A + ridge*I = L L^T`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: DMatrix<f64>,
    ridge: f64,
}

impl Cholesky {
    /// Factorizes without any ridge. Fails with the index of the first
    /// non-positive leading minor.
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        factor(a, 0.0).map_err(|minor| Error::NotPositiveDefinite { minor, ridge: 0.0 })
    }

    /// Factorizes, adding `1e-8 * I` and escalating x10 up to `1e-2` when the
    /// matrix is not numerically positive definite.
    pub fn with_ridge(a: &DMatrix<f64>) -> Result<Self> {
        let mut minor = match factor(a, 0.0) {
            Ok(c) => return Ok(c),
            Err(k) => k,
        };
        let mut ridge = RIDGE_START;
        while ridge <= RIDGE_MAX * (1.0 + 1e-12) {
            match factor(a, ridge) {
                Ok(c) => {
                    log::debug!("cholesky needed ridge {ridge:e}");
                    return Ok(c);
                }
                Err(k) => minor = k,
            }
            ridge *= 10.0;
        }
        Err(Error::NotPositiveDefinite { minor, ridge: RIDGE_MAX })
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// Ridge that was added to the diagonal (0 for a clean factorization).
    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.solve_in_place(x.as_mut_slice());
        x
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        for mut col in x.column_iter_mut() {
            self.solve_in_place(col.as_mut_slice());
        }
        x
    }

    fn solve_in_place(&self, x: &mut [f64]) {
        let n = self.dim();
        let l = self.l.as_slice();
        // L y = b, column oriented
        for k in 0..n {
            let col = &l[k * n..(k + 1) * n];
            x[k] /= col[k];
            let xk = x[k];
            for i in k + 1..n {
                x[i] -= xk * col[i];
            }
        }
        // L^T x = y
        for k in (0..n).rev() {
            let col = &l[k * n..(k + 1) * n];
            let mut s = x[k];
            for i in k + 1..n {
                s -= col[i] * x[i];
            }
            x[k] = s / col[k];
        }
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    /// `T^{-1}`, where `T = L[start.., start..]`.
    ///
    /// For a matrix partitioned as `(f, u)` with `u` trailing, the `(u,u)`
    /// block of `A^{-1}` equals `T^{-T} T^{-1}`: its entries are dot products
    /// of the columns of the returned matrix.
    pub fn trailing_inverse_factor(&self, start: usize) -> DMatrix<f64> {
        let n = self.dim();
        let t = self.l.view((start, start), (n - start, n - start)).clone_owned();
        lower_triangular_inverse(&t)
    }

    /// Trace of the trailing `(start.., start..)` block of `A^{-1}`.
    pub fn trailing_inverse_trace(&self, start: usize) -> f64 {
        self.trailing_inverse_factor(start).norm_squared()
    }

    /// The `(range, range)` block of `A^{-1}`, by solving against unit vectors.
    pub fn inverse_block(&self, range: std::ops::Range<usize>) -> DMatrix<f64> {
        let n = self.dim();
        let k = range.len();
        let mut out = DMatrix::zeros(k, k);
        let mut e = vec![0.0; n];
        for (c, idx) in range.clone().enumerate() {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[idx] = 1.0;
            self.solve_in_place(&mut e);
            for (r, jdx) in range.clone().enumerate() {
                out[(r, c)] = e[jdx];
            }
        }
        out
    }

    /// Full inverse. Test and small-problem use only.
    pub fn inverse(&self) -> DMatrix<f64> {
        self.inverse_block(0..self.dim())
    }
}

/// Block size of the blocked factorization and triangular inverse.
const NB: usize = 48;

/// Unblocked in-place Cholesky of the `(k0..k0+kb)` diagonal block, which
/// already carries all updates from earlier blocks.
fn factor_diag_block(l: &mut DMatrix<f64>, k0: usize, kb: usize) -> std::result::Result<(), usize> {
    for j in k0..k0 + kb {
        let mut d = l[(j, j)];
        for k in k0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0 && d.is_finite()) {
            return Err(j);
        }
        let s = d.sqrt();
        l[(j, j)] = s;
        for i in j + 1..k0 + kb {
            let mut v = l[(i, j)];
            for k in k0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / s;
        }
    }
    Ok(())
}

/// Inverse of a small dense lower-triangular matrix.
fn lower_inverse_small(t: &DMatrix<f64>) -> DMatrix<f64> {
    let k = t.nrows();
    let mut x = DMatrix::<f64>::zeros(k, k);
    for j in 0..k {
        x[(j, j)] = 1.0 / t[(j, j)];
        for i in j + 1..k {
            let mut v = 0.0;
            for p in j..i {
                v += t[(i, p)] * x[(p, j)];
            }
            x[(i, j)] = -v / t[(i, i)];
        }
    }
    x
}

/// Right-looking blocked Cholesky. Returns the failing minor index on error.
fn factor(a: &DMatrix<f64>, ridge: f64) -> std::result::Result<Cholesky, usize> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "cholesky of a non-square matrix");
    let mut l = a.clone();
    for i in 0..n {
        l[(i, i)] += ridge;
    }
    let mut k0 = 0;
    while k0 < n {
        let kb = NB.min(n - k0);
        factor_diag_block(&mut l, k0, kb)?;
        let rest = n - k0 - kb;
        if rest > 0 {
            let l11 = l.view((k0, k0), (kb, kb)).lower_triangle();
            let inv_t = lower_inverse_small(&l11).transpose();
            let a21 = l.view((k0 + kb, k0), (rest, kb)).clone_owned();
            let l21 = a21 * inv_t;
            l.view_mut((k0 + kb, k0), (rest, kb)).copy_from(&l21);
            // trailing lower update, one block column at a time
            let mut j0 = 0;
            while j0 < rest {
                let jb = NB.min(rest - j0);
                let lhs = l21.rows(j0, rest - j0);
                let rhs = l21.rows(j0, jb);
                let mut target = l.view_mut((k0 + kb + j0, k0 + kb + j0), (rest - j0, jb));
                target.gemm(-1.0, &lhs, &rhs.transpose(), 1.0);
                j0 += jb;
            }
        }
        k0 += kb;
    }
    // clear the strict upper triangle
    for j in 1..n {
        for i in 0..j {
            l[(i, j)] = 0.0;
        }
    }
    Ok(Cholesky { l, ridge })
}

/// Inverse of the lower-triangular `t`, blocked so the bulk runs through gemm.
pub fn lower_triangular_inverse(t: &DMatrix<f64>) -> DMatrix<f64> {
    let q = t.nrows();
    let mut x = DMatrix::<f64>::zeros(q, q);
    let starts: Vec<usize> = (0..q).step_by(NB).collect();
    let diag_inv: Vec<DMatrix<f64>> = starts
        .iter()
        .map(|&s| {
            let b = NB.min(q - s);
            lower_inverse_small(&t.view((s, s), (b, b)).lower_triangle())
        })
        .collect();
    for (jb, &j0) in starts.iter().enumerate() {
        let wj = NB.min(q - j0);
        x.view_mut((j0, j0), (wj, wj)).copy_from(&diag_inv[jb]);
        for (ib, &i0) in starts.iter().enumerate().skip(jb + 1) {
            let wi = NB.min(q - i0);
            // X_ij = -T_ii^{-1} T[i, j0..i0] X[j0..i0, j]
            let acc = t.view((i0, j0), (wi, i0 - j0)) * x.view((j0, j0), (i0 - j0, wj));
            let blk = -(&diag_inv[ib] * acc);
            x.view_mut((i0, j0), (wi, wj)).copy_from(&blk);
        }
    }
    x
}

/// `(A + A^T) / 2`, in place.
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for j in 0..n {
        for i in j + 1..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_spd(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &b * b.transpose() + DMatrix::identity(n, n) * 0.5
    }

    #[test]
    fn identity_solve_returns_rhs() {
        let c = Cholesky::new(&DMatrix::identity(3, 3)).unwrap();
        let b = DVector::from_vec(vec![1.0, -2.0, 3.0]);
        assert_eq!(c.solve(&b), b);
    }

    #[test]
    fn diagonal_solve() {
        let c = Cholesky::new(&DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 4.0]))).unwrap();
        let x = c.solve(&DVector::from_vec(vec![2.0, 4.0]));
        assert!((x[0] - 1.0).abs() < 1e-15 && (x[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn random_spd_residual() {
        let a = random_spd(6, 3);
        let c = Cholesky::new(&a).unwrap();
        let b = DVector::from_fn(6, |i, _| i as f64 - 2.5);
        let x = c.solve(&b);
        let res = (&a * x - &b).amax();
        assert!(res < 1e-10, "residual {res}");
    }

    #[test]
    fn reports_leading_minor() {
        let mut a = DMatrix::identity(4, 4);
        a[(2, 2)] = -1.0;
        match Cholesky::new(&a) {
            Err(Error::NotPositiveDefinite { minor, .. }) => assert_eq!(minor, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ridge_rescues_semidefinite() {
        let v = DVector::from_vec(vec![1.0, 1.0, 1.0]);
        let a = &v * v.transpose();
        let c = Cholesky::with_ridge(&a).unwrap();
        assert!(c.ridge() > 0.0 && c.ridge() <= RIDGE_MAX);
    }

    #[test]
    fn trailing_trace_matches_dense_inverse() {
        let a = random_spd(9, 11);
        let c = Cholesky::new(&a).unwrap();
        let inv = a.clone().try_inverse().unwrap();
        let dense: f64 = (4..9).map(|i| inv[(i, i)]).sum();
        assert!((c.trailing_inverse_trace(4) - dense).abs() < 1e-10);
        let block = c.inverse_block(0..4);
        assert!((block - inv.view((0, 0), (4, 4))).amax() < 1e-10);
    }

    #[test]
    fn trailing_factor_gives_offdiagonal_entries() {
        let a = random_spd(7, 5);
        let c = Cholesky::new(&a).unwrap();
        let inv = a.try_inverse().unwrap();
        let x = c.trailing_inverse_factor(2);
        assert!((x.column(1).dot(&x.column(2)) - inv[(3, 4)]).abs() < 1e-10);
        assert!((x.column(0).dot(&x.column(4)) - inv[(2, 6)]).abs() < 1e-10);
    }

    #[test]
    fn blocked_factor_matches_reconstruction() {
        for n in [1, 47, 48, 49, 130] {
            let a = random_spd(n, n as u64);
            let c = Cholesky::new(&a).unwrap();
            let err = (c.l() * c.l().transpose() - &a).amax();
            assert!(err < 1e-9 * a.amax(), "n {n}: {err}");
            let x = lower_triangular_inverse(c.l());
            let id = (c.l() * x - DMatrix::identity(n, n)).amax();
            assert!(id < 1e-9, "n {n}: {id}");
        }
    }
}

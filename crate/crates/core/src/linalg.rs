//! Dense symmetric factorization with pivot reporting and the single-retry
//! jitter policy used throughout the crate.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Cholesky {
    l: DMatrix<f64>,
}

impl Cholesky {
    /// Plain Cholesky; on failure returns the 0-based pivot that was not
    /// strictly positive.
    pub fn factor(a: &DMatrix<f64>) -> std::result::Result<Self, usize> {
        let n = a.nrows();
        debug_assert_eq!(n, a.ncols());
        let mut l = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(j);
            }
            let d = d.sqrt();
            l[(j, j)] = d;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / d;
            }
        }
        Ok(Cholesky { l })
    }

    /// Factor; if that fails, add `jitter` to the diagonal once and retry.
    pub fn factor_with_jitter(a: &DMatrix<f64>, jitter: f64) -> Result<Self> {
        match Self::factor(a) {
            Ok(c) => Ok(c),
            Err(_) => {
                let mut b = a.clone();
                for i in 0..b.nrows() {
                    b[(i, i)] += jitter;
                }
                Self::factor(&b).map_err(|pivot| Error::Conditioning { pivot })
            }
        }
    }

    /// Jitter policy for covariance blocks: 1e-10 · mean(diagonal).
    pub fn factor_covariance(a: &DMatrix<f64>) -> Result<Self> {
        let n = a.nrows().max(1) as f64;
        let mean_diag = a.diagonal().iter().map(|v| v.abs()).sum::<f64>() / n;
        let jitter = 1e-10 * if mean_diag > 0.0 { mean_diag } else { 1.0 };
        Self::factor_with_jitter(a, jitter)
    }

    /// Jitter policy for small normal-equation systems: 1e-10 · trace, with a
    /// unit fallback when the trace vanishes.
    pub fn factor_normal_equations(a: &DMatrix<f64>) -> Result<Self> {
        let tr = a.trace().abs();
        let jitter = 1e-10 * if tr > 0.0 { tr } else { 1.0 };
        Self::factor_with_jitter(a, jitter)
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.dim();
        let mut z = b.clone();
        for i in 0..n {
            let mut s = z[i];
            for k in 0..i {
                s -= self.l[(i, k)] * z[k];
            }
            z[i] = s / self.l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = z[i];
            for k in (i + 1)..n {
                s -= self.l[(k, i)] * z[k];
            }
            z[i] = s / self.l[(i, i)];
        }
        z
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(b.nrows(), b.ncols());
        for j in 0..b.ncols() {
            let col = self.solve_vec(&b.column(j).into_owned());
            out.set_column(j, &col);
        }
        out
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut inv = self.solve_mat(&DMatrix::identity(n, n));
        symmetrize(&mut inv);
        inv
    }

    pub fn ln_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }
}

pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_spd_system() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let c = Cholesky::factor(&a).unwrap();
        let b = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let x = c.solve_vec(&b);
        assert!((&a * &x - &b).norm() < 1e-13);
        let ident = &a * c.inverse();
        assert!((ident - DMatrix::identity(3, 3)).norm() < 1e-13);
        assert!((c.ln_det() - a.determinant().ln()).abs() < 1e-13);
    }

    #[test]
    fn reports_failing_pivot() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert_eq!(Cholesky::factor(&a).unwrap_err(), 1);
        match Cholesky::factor_covariance(&a) {
            Err(Error::Conditioning { pivot }) => assert_eq!(pivot, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn jitter_rescues_semidefinite() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(Cholesky::factor(&a).is_err());
        assert!(Cholesky::factor_covariance(&a).is_ok());
    }
}

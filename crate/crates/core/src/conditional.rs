//! Full conditionals used by the E-step: Gamma mixing weights, the Gaussian
//! law of the response given the weights and the first `p` values, and its
//! observed/missing partition.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{symmetrize, Cholesky};
use crate::model::{companion_power_rows, location_at, psi_weights, Theta};

/// Shape and rate of the Gamma full conditional of u_t (shape–rate form).
///
/// `t` is a 0-based series index and must satisfy `p <= t < n`.
pub fn gamma_full_conditional(
    theta: &Theta,
    y_full: &[f64],
    x: &DMatrix<f64>,
    t: usize,
) -> Result<(f64, f64)> {
    let p = theta.p();
    if t < p || t >= y_full.len() {
        return Err(Error::domain(format!(
            "time index {t} outside the conditioned range [{p}, {})",
            y_full.len()
        )));
    }
    if x.nrows() != y_full.len() || x.ncols() != theta.q() {
        return Err(Error::domain("covariate matrix does not match the series"));
    }
    let xb = x * &theta.beta;
    let resid = y_full[t] - location_at(&theta.phi, y_full, xb.as_slice(), t);
    Ok(gamma_params(theta.nu, theta.sigma2, resid))
}

#[inline]
pub(crate) fn gamma_params(nu: f64, sigma2: f64, resid: f64) -> (f64, f64) {
    (0.5 * (nu + 1.0), 0.5 * (nu + resid * resid / sigma2))
}

/// Law of (y_p, ..., y_{n-1}) given u and the first p values.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianConditional {
    pub mu_tilde: DVector<f64>,
    pub sigma_tilde: DMatrix<f64>,
}

/// Law of the censored/missing block given everything else.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedConditional {
    pub mu_star: DVector<f64>,
    pub sigma_star: DMatrix<f64>,
    /// Positions within 0..n−p of the censored entries, ascending.
    pub miss_index: Vec<usize>,
}

/// μ̃ and Σ̃ for the last n−p values. `u` has length n−p and `x` is the full
/// n×q covariate matrix.
pub fn conditional_gaussian_moments(
    theta: &Theta,
    u: &[f64],
    y_first_p: &[f64],
    x: &DMatrix<f64>,
) -> Result<GaussianConditional> {
    let (p, q) = (theta.p(), theta.q());
    let n = x.nrows();
    if y_first_p.len() != p || x.ncols() != q || n < p || u.len() != n - p {
        return Err(Error::domain(format!(
            "dimension mismatch: need p = {p} initial values and n − p = {} weights",
            n.saturating_sub(p)
        )));
    }
    if let Some(i) = u.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::domain(format!("weight u[{i}] = {} is not positive", u[i])));
    }
    let m = n - p;
    let xb = x * &theta.beta;
    // centered initial window, most-recent-first
    let z0: Vec<f64> = (0..p).map(|j| y_first_p[p - 1 - j] - xb[p - 1 - j]).collect();
    let rows = companion_power_rows(theta.phi.as_slice(), m);
    let mu_tilde = DVector::from_fn(m, |k, _| {
        let row = &rows[k + 1];
        xb[p + k] + row.iter().zip(&z0).map(|(a, b)| a * b).sum::<f64>()
    });

    let c = psi_weights(theta.phi.as_slice(), m)?.c;
    let var: Vec<f64> = u.iter().map(|&ui| theta.sigma2 / ui).collect();
    let mut sigma_tilde = DMatrix::zeros(m, m);
    for k in 0..m {
        for l in 0..=k {
            let s: f64 = (0..=l).map(|j| var[j] * c[k - j] * c[l - j]).sum();
            sigma_tilde[(k, l)] = s;
            sigma_tilde[(l, k)] = s;
        }
    }
    Ok(GaussianConditional {
        mu_tilde,
        sigma_tilde,
    })
}

/// Conditions the censored block (`cens_mask[i] == true`) on the observed
/// block, whose values are given in ascending position order.
pub fn partition_and_condition(
    gc: &GaussianConditional,
    cens_mask: &[bool],
    y_observed: &[f64],
) -> Result<PartitionedConditional> {
    let m = gc.mu_tilde.len();
    if cens_mask.len() != m {
        return Err(Error::domain("censoring mask length differs from n − p"));
    }
    let miss: Vec<usize> = (0..m).filter(|&i| cens_mask[i]).collect();
    let obs: Vec<usize> = (0..m).filter(|&i| !cens_mask[i]).collect();
    if y_observed.len() != obs.len() {
        return Err(Error::domain(format!(
            "expected {} observed values, got {}",
            obs.len(),
            y_observed.len()
        )));
    }
    let mu_m = DVector::from_fn(miss.len(), |i, _| gc.mu_tilde[miss[i]]);
    let s_mm = DMatrix::from_fn(miss.len(), miss.len(), |i, j| gc.sigma_tilde[(miss[i], miss[j])]);
    if obs.is_empty() || miss.is_empty() {
        return Ok(PartitionedConditional {
            mu_star: mu_m,
            sigma_star: s_mm,
            miss_index: miss,
        });
    }
    let s_oo = DMatrix::from_fn(obs.len(), obs.len(), |i, j| gc.sigma_tilde[(obs[i], obs[j])]);
    let s_om = DMatrix::from_fn(obs.len(), miss.len(), |i, j| gc.sigma_tilde[(obs[i], miss[j])]);
    let resid = DVector::from_fn(obs.len(), |i, _| y_observed[i] - gc.mu_tilde[obs[i]]);
    let chol = Cholesky::factor_covariance(&s_oo)?;
    let w = chol.solve_mat(&s_om);
    let mu_star = mu_m + w.transpose() * resid;
    let mut sigma_star = s_mm - s_om.transpose() * w;
    symmetrize(&mut sigma_star);
    Ok(PartitionedConditional {
        mu_star,
        sigma_star,
        miss_index: miss,
    })
}

/// Full conditional N(mean, var) of y_t given every other value of the
/// completed series and the weights, for 0-based `t >= p`.
///
/// y_t enters the residuals ρ_s for s = t, ..., min(t + p, n − 1) only, so
/// this touches at most p + 1 factors of the joint density. `xb` is Xβ and
/// `u` is indexed from time p.
pub(crate) fn coordinate_conditional(
    phi: &DVector<f64>,
    sigma2: f64,
    u: &[f64],
    y: &[f64],
    xb: &[f64],
    t: usize,
) -> (f64, f64) {
    let p = phi.len();
    let n = y.len();
    debug_assert!(t >= p && t < n);
    let yt = y[t];
    let mut prec = 0.0;
    let mut lin = 0.0;
    for s in t..n.min(t + p + 1) {
        let a = if s == t { 1.0 } else { -phi[s - t - 1] };
        let rho = y[s] - location_at(phi, y, xb, s);
        let rest = rho - a * yt;
        let w = u[s - p];
        prec += w * a * a;
        lin += w * a * rest;
    }
    (-lin / prec, sigma2 / prec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn theta(beta: &[f64], phi: &[f64], sigma2: f64, nu: f64) -> Theta {
        Theta::new(beta.to_vec(), phi.to_vec(), sigma2, nu).unwrap()
    }

    #[test]
    fn gamma_conditional_examples() {
        let x = DMatrix::from_element(3, 1, 0.0);
        let th = theta(&[0.0], &[0.0], 1.0, 4.0);
        assert_eq!(gamma_full_conditional(&th, &[0.0, 0.0, 0.0], &x, 1).unwrap(), (2.5, 2.0));
        let th = theta(&[0.0], &[0.0], 2.0, 4.0);
        assert_eq!(gamma_full_conditional(&th, &[0.0, 2.0, 0.0], &x, 1).unwrap(), (2.5, 3.0));
        let th = theta(&[0.0], &[0.0], 1.0, 1.0);
        assert_eq!(gamma_full_conditional(&th, &[0.0, 0.0, 0.0], &x, 2).unwrap(), (1.0, 0.5));
        assert!(gamma_full_conditional(&th, &[0.0, 0.0, 0.0], &x, 0).is_err());
    }

    #[test]
    fn independent_innovations() {
        let x = DMatrix::from_fn(6, 2, |i, j| if j == 0 { 1.0 } else { i as f64 });
        let th = theta(&[1.0, 0.5], &[0.0, 0.0], 1.7, 5.0);
        let gc = conditional_gaussian_moments(&th, &[1.0; 4], &[3.0, -2.0], &x).unwrap();
        assert_eq!(gc.sigma_tilde, DMatrix::identity(4, 4) * 1.7);
        for k in 0..4 {
            assert_eq!(gc.mu_tilde[k], 1.0 + 0.5 * (k + 2) as f64);
        }
    }

    #[test]
    fn heterogeneous_weights_example() {
        // Σ̃11 = 2/1, Σ̃12 = 2·0.5/1, Σ̃22 = 2·0.25/1 + 2/4
        let x = DMatrix::from_element(3, 1, 0.0);
        let th = theta(&[0.0], &[0.5], 2.0, 4.0);
        let gc = conditional_gaussian_moments(&th, &[1.0, 4.0], &[0.0], &x).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 1.0]);
        assert!((gc.sigma_tilde - expect).norm() < 1e-15);
    }

    #[test]
    fn ar1_closed_form_mean_and_cov() {
        let rho = 0.6_f64;
        let x = DMatrix::from_element(5, 1, 1.0);
        let th = theta(&[2.0], &[rho], 1.5, 4.0);
        let gc = conditional_gaussian_moments(&th, &[1.0; 4], &[3.0], &x).unwrap();
        for k in 0..4 {
            assert!((gc.mu_tilde[k] - (2.0 + rho.powi(k as i32 + 1))).abs() < 1e-14);
            for l in 0..4 {
                let s: f64 = (0..=k.min(l))
                    .map(|j| rho.powi((k - j) as i32) * rho.powi((l - j) as i32))
                    .sum();
                assert!((gc.sigma_tilde[(k, l)] - 1.5 * s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_nonpositive_weight() {
        let x = DMatrix::from_element(3, 1, 0.0);
        let th = theta(&[0.0], &[0.5], 2.0, 4.0);
        assert!(conditional_gaussian_moments(&th, &[1.0, 0.0], &[0.0], &x).is_err());
    }

    #[test]
    fn bivariate_conditioning() {
        let gc = GaussianConditional {
            mu_tilde: DVector::from_vec(vec![0.0, 0.0]),
            sigma_tilde: DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]),
        };
        let pc = partition_and_condition(&gc, &[true, false], &[1.0]).unwrap();
        assert!((pc.mu_star[0] - 0.5).abs() < 1e-15);
        assert!((pc.sigma_star[(0, 0)] - 0.75).abs() < 1e-15);
        assert_eq!(pc.miss_index, vec![0]);

        let all = partition_and_condition(&gc, &[true, true], &[]).unwrap();
        assert_eq!(all.mu_star, gc.mu_tilde);
        assert_eq!(all.sigma_star, gc.sigma_tilde);

        let none = partition_and_condition(&gc, &[false, false], &[0.3, 0.1]).unwrap();
        assert_eq!(none.mu_star.len(), 0);
        assert_eq!(none.sigma_star.nrows(), 0);
    }

    #[test]
    fn singular_observed_block_reports_pivot() {
        let gc = GaussianConditional {
            mu_tilde: DVector::zeros(3),
            sigma_tilde: DMatrix::from_row_slice(
                3,
                3,
                &[1.0, 2.0, 0.0, 2.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            ),
        };
        match partition_and_condition(&gc, &[false, false, true], &[0.0, 0.0]) {
            Err(Error::Conditioning { pivot }) => assert_eq!(pivot, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn coordinate_conditional_matches_dense_conditioning() {
        let n = 9;
        let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { (i as f64 * 0.7).sin() });
        let th = theta(&[0.4, -1.2], &[0.5, -0.3], 1.3, 4.0);
        let u = [0.7, 1.2, 0.4, 2.0, 1.0, 0.9, 1.6];
        let y: Vec<f64> = (0..n).map(|i| (i as f64 * 1.3).cos() * 2.0).collect();
        let gc = conditional_gaussian_moments(&th, &u, &y[..2], &x).unwrap();
        let xb: Vec<f64> = (&x * &th.beta).iter().copied().collect();
        for t in 2..n {
            let mut mask = vec![false; n - 2];
            mask[t - 2] = true;
            let obs: Vec<f64> = (2..n).filter(|&s| s != t).map(|s| y[s]).collect();
            let pc = partition_and_condition(&gc, &mask, &obs).unwrap();
            let (mean, var) = coordinate_conditional(&th.phi, th.sigma2, &u, &y, &xb, t);
            assert!((mean - pc.mu_star[0]).abs() < 1e-10, "t={t}");
            assert!((var - pc.sigma_star[(0, 0)]).abs() < 1e-10, "t={t}");
        }
    }
}

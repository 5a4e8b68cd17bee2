//! Observed information by Louis' identity, accumulated by stochastic
//! approximation from complete-data scores and Hessians.
//!
//! Parameter order is (β, φ, σ², ν) throughout.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::symmetrize;
use crate::model::Theta;
use crate::sampler::LatentDraw;
use crate::special::{digamma, normal_quantile, trigamma};

/// Stochastic-approximation state: Δ tracks E[S_c], G tracks E[B_c + S_c S_cᵀ].
#[derive(Debug, Clone, PartialEq)]
pub struct LouisAccumulators {
    pub delta: DVector<f64>,
    pub g: DMatrix<f64>,
    pub updates: usize,
}

impl LouisAccumulators {
    pub fn new(d: usize) -> Self {
        LouisAccumulators {
            delta: DVector::zeros(d),
            g: DMatrix::zeros(d, d),
            updates: 0,
        }
    }
}

/// Complete-data score S_c and Hessian B_c in a single pass.
pub fn score_and_hessian(
    theta: &Theta,
    draw: &LatentDraw,
    x: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (p, q) = (theta.p(), theta.q());
    let n = draw.y_full.len();
    if x.nrows() != n || x.ncols() != q || draw.u.len() + p != n {
        return Err(Error::domain("draw dimensions do not match the parameters"));
    }
    let d = q + p + 2;
    let (ib, ip, is, iv) = (0, q, q + p, q + p + 1);
    let s2 = theta.sigma2;
    let nu = theta.nu;
    let m = (n - p) as f64;
    let y = &draw.y_full;
    let xb = x * &theta.beta;

    let mut s_rho_alpha = DVector::<f64>::zeros(q);
    let mut s_rho_w = DVector::<f64>::zeros(p);
    let mut s_rho2 = 0.0;
    let mut s_logu = 0.0;
    let mut s_u = 0.0;
    let mut s_aa = DMatrix::<f64>::zeros(q, q);
    let mut s_ww = DMatrix::<f64>::zeros(p, p);
    // Σ u (α wᵀ + ρ X_(i,p)ᵀ), the negated β–φ cross block before scaling
    let mut s_cross = DMatrix::<f64>::zeros(q, p);
    let mut alpha = vec![0.0; q];
    let mut w = vec![0.0; p];

    for i in p..n {
        let u = draw.u[i - p];
        for j in 0..p {
            w[j] = y[i - 1 - j] - xb[i - 1 - j];
        }
        let mu = xb[i] + (0..p).map(|j| theta.phi[j] * w[j]).sum::<f64>();
        let rho = y[i] - mu;
        for (c, a) in alpha.iter_mut().enumerate() {
            *a = x[(i, c)] - (0..p).map(|j| theta.phi[j] * x[(i - 1 - j, c)]).sum::<f64>();
        }
        s_rho2 += u * rho * rho;
        s_logu += u.ln();
        s_u += u;
        for a in 0..q {
            s_rho_alpha[a] += u * rho * alpha[a];
            for b in 0..q {
                s_aa[(a, b)] += u * alpha[a] * alpha[b];
            }
            for j in 0..p {
                s_cross[(a, j)] += u * (alpha[a] * w[j] + rho * x[(i - 1 - j, a)]);
            }
        }
        for j in 0..p {
            s_rho_w[j] += u * rho * w[j];
            for k in 0..p {
                s_ww[(j, k)] += u * w[j] * w[k];
            }
        }
    }

    let mut score = DVector::zeros(d);
    for a in 0..q {
        score[ib + a] = s_rho_alpha[a] / s2;
    }
    for j in 0..p {
        score[ip + j] = s_rho_w[j] / s2;
    }
    score[is] = -m / (2.0 * s2) + s_rho2 / (2.0 * s2 * s2);
    score[iv] = 0.5 * m * ((0.5 * nu).ln() + 1.0 - digamma(0.5 * nu)) + 0.5 * (s_logu - s_u);

    let mut hess = DMatrix::zeros(d, d);
    for a in 0..q {
        for b in 0..q {
            hess[(ib + a, ib + b)] = -s_aa[(a, b)] / s2;
        }
        for j in 0..p {
            let v = -s_cross[(a, j)] / s2;
            hess[(ib + a, ip + j)] = v;
            hess[(ip + j, ib + a)] = v;
        }
        let v = -score[ib + a] / s2;
        hess[(ib + a, is)] = v;
        hess[(is, ib + a)] = v;
    }
    for j in 0..p {
        for k in 0..p {
            hess[(ip + j, ip + k)] = -s_ww[(j, k)] / s2;
        }
        let v = -score[ip + j] / s2;
        hess[(ip + j, is)] = v;
        hess[(is, ip + j)] = v;
    }
    hess[(is, is)] = m / (2.0 * s2 * s2) - s_rho2 / (s2 * s2 * s2);
    hess[(iv, iv)] = 0.5 * m * (1.0 / nu - 0.5 * trigamma(0.5 * nu));
    Ok((score, hess))
}

/// Gradient of the complete-data log-likelihood.
pub fn complete_score(theta: &Theta, draw: &LatentDraw, x: &DMatrix<f64>) -> Result<DVector<f64>> {
    score_and_hessian(theta, draw, x).map(|(s, _)| s)
}

/// Hessian of the complete-data log-likelihood; the ν row and column vanish
/// off the diagonal.
pub fn complete_hessian(theta: &Theta, draw: &LatentDraw, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    score_and_hessian(theta, draw, x).map(|(_, h)| h)
}

/// Δ ← Δ + δ(mean S_c − Δ), G ← G + δ(mean (B_c + S_c S_cᵀ) − G).
pub fn louis_update(
    acc: &mut LouisAccumulators,
    draws: &[LatentDraw],
    theta: &Theta,
    x: &DMatrix<f64>,
    delta: f64,
) -> Result<()> {
    if draws.is_empty() {
        return Err(Error::domain("Louis update needs at least one draw"));
    }
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::domain(format!("step size {delta} outside (0, 1]")));
    }
    let d = acc.delta.len();
    let mut mean_s = DVector::<f64>::zeros(d);
    let mut mean_b = DMatrix::<f64>::zeros(d, d);
    for draw in draws {
        let (s, h) = score_and_hessian(theta, draw, x)?;
        if s.len() != d {
            return Err(Error::domain("accumulator dimension does not match the parameters"));
        }
        mean_b += h + &s * s.transpose();
        mean_s += s;
    }
    let inv = 1.0 / draws.len() as f64;
    mean_s *= inv;
    mean_b *= inv;
    if delta == 1.0 {
        acc.delta = mean_s;
        acc.g = mean_b;
    } else {
        acc.delta += (mean_s - &acc.delta) * delta;
        acc.g += (mean_b - &acc.g) * delta;
    }
    symmetrize(&mut acc.g);
    acc.updates += 1;
    Ok(())
}

/// H = −G + ΔΔᵀ.
pub fn observed_information(acc: &LouisAccumulators) -> DMatrix<f64> {
    let mut h = -&acc.g + &acc.delta * acc.delta.transpose();
    symmetrize(&mut h);
    h
}

/// √diag(H⁻¹); `None` where the diagonal of H⁻¹ is negative or not finite.
pub fn standard_errors(h: &DMatrix<f64>) -> Result<Vec<Option<f64>>> {
    let mut h = h.clone();
    symmetrize(&mut h);
    let inv = invert(&h, &h).or_else(|| {
        let d = h.nrows().max(1) as f64;
        let mean_diag = h.diagonal().iter().map(|v| v.abs()).sum::<f64>() / d;
        let jitter = 1e-10 * if mean_diag > 0.0 { mean_diag } else { 1.0 };
        let mut hj = h.clone();
        for i in 0..hj.nrows() {
            hj[(i, i)] += jitter;
        }
        invert(&hj, &h)
    });
    let inv = inv.ok_or_else(|| Error::Inference("information matrix is singular".into()))?;
    Ok(inv
        .diagonal()
        .iter()
        .map(|&v| if v >= 0.0 && v.is_finite() { Some(v.sqrt()) } else { None })
        .collect())
}

/// Inverse of `a`, accepted only if it also inverts `target` to 1e-6.
fn invert(a: &DMatrix<f64>, target: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if a.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let inv = a.clone().lu().try_inverse()?;
    let resid = (target * &inv - DMatrix::identity(a.nrows(), a.nrows())).amax();
    (inv.iter().all(|v| v.is_finite()) && resid < 1e-6).then_some(inv)
}

/// Wald interval est ± z·se with z the (1 + level)/2 normal quantile.
pub fn confidence_interval(est: f64, se: f64, level: f64) -> Result<(f64, f64)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::domain(format!("confidence level {level} outside (0, 1)")));
    }
    if !(se >= 0.0) {
        return Err(Error::domain(format!("standard error {se} is negative")));
    }
    let z = normal_quantile(0.5 + 0.5 * level);
    Ok((est - z * se, est + z * se))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (Theta, LatentDraw, DMatrix<f64>) {
        let n = 10;
        let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { (i as f64 * 0.4).cos() });
        let theta = Theta::new(vec![0.5, -0.3], vec![0.4, 0.1], 1.5, 6.0).unwrap();
        let y: Vec<f64> = (0..n).map(|i| (i as f64 * 1.7).sin() + 0.5).collect();
        let u: Vec<f64> = (0..n - 2).map(|i| 0.5 + 0.1 * i as f64).collect();
        (theta, LatentDraw { y_full: y, u }, x)
    }

    #[test]
    fn zero_residual_score() {
        // y equal to its conditional location everywhere with u ≡ 1
        let n = 6;
        let x = DMatrix::from_element(n, 1, 1.0);
        let theta = Theta::new(vec![2.0], vec![0.5], 3.0, 4.0).unwrap();
        let draw = LatentDraw {
            y_full: vec![2.0; n],
            u: vec![1.0; n - 1],
        };
        let s = complete_score(&theta, &draw, &x).unwrap();
        assert_eq!(s[0], 0.0);
        assert_eq!(s[1], 0.0);
        assert!((s[2] + 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn hessian_is_symmetric_with_zero_nu_blocks() {
        let (theta, draw, x) = toy();
        let h = complete_hessian(&theta, &draw, &x).unwrap();
        assert_eq!(h, h.transpose());
        let iv = 5;
        for j in 0..iv {
            assert_eq!(h[(iv, j)], 0.0);
            assert_eq!(h[(j, iv)], 0.0);
        }
    }

    #[test]
    fn beta_block_with_unit_weights() {
        let (theta, mut draw, x) = toy();
        draw.u.iter_mut().for_each(|u| *u = 1.0);
        let h = complete_hessian(&theta, &draw, &x).unwrap();
        let mut expect = DMatrix::<f64>::zeros(2, 2);
        for i in 2..10 {
            let alpha = DVector::from_fn(2, |c, _| {
                x[(i, c)] - 0.4 * x[(i - 1, c)] - 0.1 * x[(i - 2, c)]
            });
            expect += &alpha * alpha.transpose();
        }
        expect /= -1.5;
        assert!((h.view((0, 0), (2, 2)) - expect).norm() < 1e-12);
    }

    #[test]
    fn single_memoryless_update() {
        let (theta, draw, x) = toy();
        let mut acc = LouisAccumulators::new(6);
        louis_update(&mut acc, std::slice::from_ref(&draw), &theta, &x, 1.0).unwrap();
        let (s, h) = score_and_hessian(&theta, &draw, &x).unwrap();
        assert_eq!(acc.delta, s);
        let mut expect = h + &s * s.transpose();
        symmetrize(&mut expect);
        assert_eq!(acc.g, expect);

        let twice = vec![draw.clone(), draw.clone()];
        let mut acc2 = LouisAccumulators::new(6);
        louis_update(&mut acc2, &twice, &theta, &x, 1.0).unwrap();
        assert!((acc2.g - &acc.g).norm() < 1e-9 * acc.g.norm());
    }

    #[test]
    fn information_from_accumulators() {
        let acc = LouisAccumulators {
            delta: DVector::zeros(2),
            g: -DMatrix::identity(2, 2),
            updates: 1,
        };
        assert_eq!(observed_information(&acc), DMatrix::identity(2, 2));
        let acc = LouisAccumulators {
            delta: DVector::from_element(1, 0.5),
            g: DMatrix::from_element(1, 1, -2.0),
            updates: 1,
        };
        assert_eq!(observed_information(&acc)[(0, 0)], 2.25);
    }

    #[test]
    fn standard_error_contract() {
        let se = standard_errors(&DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 25.0]))).unwrap();
        assert_eq!(se, vec![Some(0.5), Some(0.2)]);
        let se = standard_errors(&DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, -1.0]))).unwrap();
        assert_eq!(se, vec![Some(0.5), None]);
        assert!(matches!(
            standard_errors(&DMatrix::from_element(2, 2, 1.0)),
            Err(Error::Inference(_))
        ));
    }

    #[test]
    fn wald_intervals() {
        let (lo, hi) = confidence_interval(0.0, 1.0, 0.95).unwrap();
        assert!((hi - 1.959_963_984_540_054).abs() < 1e-12);
        assert_eq!(lo, -hi);
        assert_eq!(confidence_interval(3.0, 0.0, 0.95).unwrap(), (3.0, 3.0));
        let (lo, hi) = confidence_interval(5.0, 0.125, 0.95).unwrap();
        assert!((lo - 4.755).abs() < 1e-3 && (hi - 5.245).abs() < 1e-3);
        assert!(confidence_interval(0.0, 1.0, 1.0).is_err());
    }
}

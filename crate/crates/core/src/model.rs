//! Model definition: orders, parameters, censored data container, Student-t
//! density/CDF and the AR companion-matrix machinery.
//!
//! Time indices are 0-based throughout the crate. Lag windows are always
//! ordered most-recent-first: the window for time `t` is
//! `(y[t-1], y[t-2], ..., y[t-p])`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::special::{beta_reg_split, ln_gamma};

/// Margin used by [`is_stationary`]: the companion spectral radius must be
/// below `1 - STATIONARITY_MARGIN`.
pub const STATIONARITY_MARGIN: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSpec {
    /// Autoregressive order.
    pub p: usize,
    /// Number of regression covariates.
    pub q: usize,
}

impl ModelSpec {
    pub fn new(p: usize, q: usize) -> Result<Self> {
        if p == 0 || q == 0 {
            return Err(Error::domain(format!("need p >= 1 and q >= 1, got p={p}, q={q}")));
        }
        Ok(ModelSpec { p, q })
    }

    /// Length of the stacked parameter vector (β, φ, σ², ν).
    pub fn n_params(&self) -> usize {
        self.q + self.p + 2
    }

    pub fn check_length(&self, n: usize) -> Result<()> {
        if n <= self.p + self.q {
            return Err(Error::Precondition(format!(
                "series length {n} must exceed p + q = {}",
                self.p + self.q
            )));
        }
        Ok(())
    }

    pub fn parameter_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.q).map(|j| format!("beta{j}")).collect();
        names.extend((1..=self.p).map(|j| format!("phi{j}")));
        names.push("sigma2".into());
        names.push("nu".into());
        names
    }
}

/// Full parameter vector θ = (β, φ, σ², ν).
#[derive(Debug, Clone, PartialEq)]
pub struct Theta {
    pub beta: DVector<f64>,
    pub phi: DVector<f64>,
    pub sigma2: f64,
    /// Degrees of freedom. `f64::INFINITY` denotes Gaussian innovations and
    /// is only meaningful for data generation.
    pub nu: f64,
}

impl Theta {
    pub fn new(beta: Vec<f64>, phi: Vec<f64>, sigma2: f64, nu: f64) -> Result<Self> {
        if beta.is_empty() || phi.is_empty() {
            return Err(Error::domain("beta and phi must be non-empty"));
        }
        if !(sigma2 > 0.0) {
            return Err(Error::domain(format!("sigma2 must be positive, got {sigma2}")));
        }
        if !(nu > 0.0) {
            return Err(Error::domain(format!("nu must be positive, got {nu}")));
        }
        Ok(Theta {
            beta: DVector::from_vec(beta),
            phi: DVector::from_vec(phi),
            sigma2,
            nu,
        })
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            p: self.phi.len(),
            q: self.beta.len(),
        }
    }

    pub fn p(&self) -> usize {
        self.phi.len()
    }

    pub fn q(&self) -> usize {
        self.beta.len()
    }

    /// Stacked as (β, φ, σ², ν).
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.beta.iter().copied().collect();
        v.extend(self.phi.iter().copied());
        v.push(self.sigma2);
        v.push(self.nu);
        v
    }

    pub fn from_slice(spec: ModelSpec, v: &[f64]) -> Result<Self> {
        if v.len() != spec.n_params() {
            return Err(Error::domain(format!(
                "expected {} parameters, got {}",
                spec.n_params(),
                v.len()
            )));
        }
        let (q, p) = (spec.q, spec.p);
        Theta::new(v[..q].to_vec(), v[q..q + p].to_vec(), v[q + p], v[q + p + 1])
    }

    pub fn is_stationary(&self) -> bool {
        is_stationary(self.phi.as_slice())
    }
}

/// Response with per-observation censoring intervals and covariates.
///
/// Missing values are censored observations with interval (−∞, +∞). For
/// censored entries `y` is a placeholder and may be NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct CensoredSeries {
    pub y: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub cens: Vec<bool>,
    pub x: DMatrix<f64>,
}

impl CensoredSeries {
    pub fn new(
        y: Vec<f64>,
        lower: Vec<f64>,
        upper: Vec<f64>,
        cens: Vec<bool>,
        x: DMatrix<f64>,
    ) -> Result<Self> {
        let n = y.len();
        if lower.len() != n || upper.len() != n || cens.len() != n || x.nrows() != n {
            return Err(Error::domain("series components must all have length n"));
        }
        if x.ncols() == 0 {
            return Err(Error::domain("covariate matrix needs at least one column"));
        }
        for t in 0..n {
            if cens[t] {
                if lower[t].is_nan() || upper[t].is_nan() || lower[t] > upper[t] {
                    return Err(Error::domain(format!(
                        "time {t}: invalid censoring interval [{}, {}]",
                        lower[t], upper[t]
                    )));
                }
                if lower[t] == upper[t] {
                    return Err(Error::domain(format!(
                        "time {t}: censoring interval collapses to the single point {}",
                        lower[t]
                    )));
                }
            } else if !y[t].is_finite() || lower[t] != y[t] || upper[t] != y[t] {
                return Err(Error::domain(format!(
                    "time {t}: observed value must be finite with lower = upper = y"
                )));
            }
        }
        Ok(CensoredSeries {
            y,
            lower,
            upper,
            cens,
            x,
        })
    }

    /// Fully observed series.
    pub fn observed(y: Vec<f64>, x: DMatrix<f64>) -> Result<Self> {
        let n = y.len();
        Self::new(y.clone(), y.clone(), y, vec![false; n], x)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_covariates(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_censored(&self) -> usize {
        self.cens.iter().filter(|&&c| c).count()
    }

    pub fn is_missing(&self, t: usize) -> bool {
        self.cens[t] && self.lower[t] == f64::NEG_INFINITY && self.upper[t] == f64::INFINITY
    }

    pub fn n_missing(&self) -> usize {
        (0..self.len()).filter(|&t| self.is_missing(t)).count()
    }

    /// The estimator conditions on the first `p` values, so they must be
    /// observed.
    pub fn check_first_p(&self, p: usize) -> Result<()> {
        if let Some(t) = (0..p.min(self.len())).find(|&t| self.cens[t]) {
            return Err(Error::Precondition(format!(
                "the first p = {p} observations must be fully observed, but row {} is censored",
                t + 1
            )));
        }
        Ok(())
    }

    /// x_tᵀβ for every t.
    pub fn linear_predictor(&self, beta: &DVector<f64>) -> DVector<f64> {
        &self.x * beta
    }
}

fn check_scale(sigma2: f64, nu: f64) -> Result<()> {
    if !(sigma2 > 0.0) || !(nu > 0.0) {
        return Err(Error::domain(format!(
            "Student-t needs sigma2 > 0 and nu > 0, got sigma2={sigma2}, nu={nu}"
        )));
    }
    Ok(())
}

/// Log-density of t(mu, sigma2, nu) at x.
pub fn student_t_logpdf(x: f64, mu: f64, sigma2: f64, nu: f64) -> Result<f64> {
    check_scale(sigma2, nu)?;
    Ok(t_logpdf(x - mu, sigma2, nu))
}

pub(crate) fn t_logpdf(resid: f64, sigma2: f64, nu: f64) -> f64 {
    ln_gamma(0.5 * (nu + 1.0))
        - ln_gamma(0.5 * nu)
        - 0.5 * (std::f64::consts::PI * nu * sigma2).ln()
        - 0.5 * (nu + 1.0) * (resid * resid / (nu * sigma2)).ln_1p()
}

/// CDF of t(mu, sigma2, nu) at x, via the regularized incomplete beta.
pub fn student_t_cdf(x: f64, mu: f64, sigma2: f64, nu: f64) -> Result<f64> {
    check_scale(sigma2, nu)?;
    Ok(t_cdf(x - mu, sigma2, nu))
}

pub(crate) fn t_cdf(resid: f64, sigma2: f64, nu: f64) -> f64 {
    if resid.is_nan() {
        return f64::NAN;
    }
    if resid == f64::INFINITY {
        return 1.0;
    }
    if resid == f64::NEG_INFINITY {
        return 0.0;
    }
    let z2 = resid * resid / sigma2;
    if z2 == 0.0 {
        return 0.5;
    }
    if z2 == f64::INFINITY {
        return if resid > 0.0 { 1.0 } else { 0.0 };
    }
    let denom = nu + z2;
    let tail = 0.5 * beta_reg_split(0.5 * nu, 0.5, nu / denom, z2 / denom);
    let v = if resid > 0.0 { 1.0 - tail } else { tail };
    v.clamp(0.0, 1.0)
}

/// Companion matrix Φ: first row φᵀ, identity on the subdiagonal.
pub fn companion_matrix(phi: &[f64]) -> Result<DMatrix<f64>> {
    let p = phi.len();
    if p == 0 {
        return Err(Error::domain("companion matrix needs a non-empty phi"));
    }
    let mut m = DMatrix::zeros(p, p);
    for (j, &v) in phi.iter().enumerate() {
        m[(0, j)] = v;
    }
    for i in 1..p {
        m[(i, i - 1)] = 1.0;
    }
    Ok(m)
}

/// ψ-weights c_j = (Φ^j)₁₁ together with Φ itself.
#[derive(Debug, Clone, PartialEq)]
pub struct PsiWeights {
    pub c: Vec<f64>,
    pub companion: DMatrix<f64>,
}

/// First rows of Φ^0, Φ^1, ..., Φ^k obtained by repeated multiplication.
pub(crate) fn companion_power_rows(phi: &[f64], k: usize) -> Vec<Vec<f64>> {
    let p = phi.len();
    let mut rows = Vec::with_capacity(k + 1);
    let mut row = vec![0.0; p];
    row[0] = 1.0;
    rows.push(row.clone());
    for _ in 0..k {
        // row · Φ: first column picks up φ, the rest shifts left
        let mut next = vec![0.0; p];
        for j in 0..p {
            next[j] = row[0] * phi[j] + if j + 1 < p { row[j + 1] } else { 0.0 };
        }
        row = next;
        rows.push(row.clone());
    }
    rows
}

pub fn psi_weights(phi: &[f64], k: usize) -> Result<PsiWeights> {
    let companion = companion_matrix(phi)?;
    let c = companion_power_rows(phi, k).into_iter().map(|r| r[0]).collect();
    Ok(PsiWeights { c, companion })
}

/// True iff the companion spectral radius is below 1 − [`STATIONARITY_MARGIN`].
pub fn is_stationary(phi: &[f64]) -> bool {
    if phi.is_empty() {
        return true;
    }
    if phi.iter().any(|v| !v.is_finite()) {
        return false;
    }
    let limit = 1.0 - STATIONARITY_MARGIN;
    if phi.len() == 1 {
        return phi[0].abs() < limit;
    }
    let m = companion_matrix(phi).expect("non-empty");
    let radius = m
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0_f64, f64::max);
    radius < limit
}

/// Conditional location μ_t = x_tᵀβ + (y_(t,p) − X_(t,p)β)ᵀφ.
///
/// `y_window` and the rows of `x_window` must be ordered most-recent-first.
pub fn conditional_location(
    theta: &Theta,
    y_window: &[f64],
    x_t: &[f64],
    x_window: &DMatrix<f64>,
) -> Result<f64> {
    let (p, q) = (theta.p(), theta.q());
    if y_window.len() != p || x_t.len() != q || x_window.nrows() != p || x_window.ncols() != q {
        return Err(Error::domain(format!(
            "dimension mismatch: expected window length {p} and {q} covariates"
        )));
    }
    let xb_t: f64 = x_t.iter().zip(theta.beta.iter()).map(|(a, b)| a * b).sum();
    let xb_window = x_window * &theta.beta;
    let ar: f64 = (0..p).map(|j| (y_window[j] - xb_window[j]) * theta.phi[j]).sum();
    Ok(xb_t + ar)
}

/// μ_t for a series position `t >= p`, given precomputed `xb = Xβ`.
#[inline]
pub(crate) fn location_at(phi: &DVector<f64>, y: &[f64], xb: &[f64], t: usize) -> f64 {
    let mut mu = xb[t];
    for (j, &ph) in phi.iter().enumerate() {
        mu += ph * (y[t - 1 - j] - xb[t - 1 - j]);
    }
    mu
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cauchy_center_density() {
        let v = student_t_logpdf(0.0, 0.0, 1.0, 1.0).unwrap();
        assert!((v - (1.0 / std::f64::consts::PI).ln()).abs() < 1e-14);
    }

    #[test]
    fn logpdf_translation_invariant() {
        let a = student_t_logpdf(1.0, 1.0, 4.0, 3.0).unwrap();
        let b = student_t_logpdf(0.0, 0.0, 4.0, 3.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn logpdf_nu4_matches_closed_form() {
        // log(Γ(2.5) / (Γ(2)·√(4π))), 40-digit reference
        let v = student_t_logpdf(0.0, 0.0, 1.0, 4.0).unwrap();
        assert!((v - (-0.980_829_253_011_726_2)).abs() < 1e-14);
    }

    #[test]
    fn rejects_bad_scale() {
        assert!(student_t_logpdf(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(student_t_cdf(0.0, 0.0, 1.0, -1.0).is_err());
    }

    #[test]
    fn cdf_reference_values() {
        assert_eq!(student_t_cdf(3.0, 3.0, 2.0, 5.0).unwrap(), 0.5);
        assert!((student_t_cdf(1.0, 0.0, 1.0, 1.0).unwrap() - 0.75).abs() < 1e-14);
        let v = student_t_cdf(1.959_964, 0.0, 1.0, 1e6).unwrap();
        assert!((v - 0.975).abs() < 1e-4);
    }

    #[test]
    fn companion_shapes() {
        assert_eq!(companion_matrix(&[0.5]).unwrap(), DMatrix::from_element(1, 1, 0.5));
        let m = companion_matrix(&[0.48, -0.20]).unwrap();
        assert_eq!(m, DMatrix::from_row_slice(2, 2, &[0.48, -0.20, 1.0, 0.0]));
        let z = companion_matrix(&[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(
            z,
            DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
        );
        assert!(companion_matrix(&[]).is_err());
    }

    #[test]
    fn psi_weight_examples() {
        assert_eq!(psi_weights(&[0.5], 3).unwrap().c, vec![1.0, 0.5, 0.25, 0.125]);
        let c = psi_weights(&[0.48, -0.20], 2).unwrap().c;
        // direct matrix-power oracle: 1, 0.48, 0.48² − 0.20
        assert_eq!(c[0], 1.0);
        assert!((c[1] - 0.48).abs() < 1e-15);
        assert!((c[2] - 0.0304).abs() < 1e-15);
        assert_eq!(psi_weights(&[0.0, 0.0], 4).unwrap().c, vec![1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn psi_weights_match_matrix_powers() {
        let phi = [0.3, -0.2, 0.1];
        let w = psi_weights(&phi, 6).unwrap();
        let mut power = DMatrix::<f64>::identity(3, 3);
        for j in 0..=6 {
            assert!((w.c[j] - power[(0, 0)]).abs() < 1e-14);
            power = &power * &w.companion;
        }
    }

    #[test]
    fn ar1_psi_is_power() {
        let rho: f64 = 0.73;
        let c = psi_weights(&[rho], 10).unwrap().c;
        let mut expect = 1.0;
        for cj in c {
            assert_eq!(cj, expect);
            expect *= rho;
        }
    }

    #[test]
    fn stationarity_examples() {
        assert!(is_stationary(&[0.99]));
        assert!(!is_stationary(&[1.0]));
        // eigenvalues of [[-0.4, 0.12], [1, 0]] are -0.6 and 0.2
        assert!(is_stationary(&[-0.40, 0.12]));
        assert!(is_stationary(&[0.48, -0.20]));
        // roots 1 and 0.5 of z² − 1.5z + 0.5
        assert!(!is_stationary(&[1.5, -0.5]));
    }

    #[test]
    fn location_examples() {
        let theta = Theta::new(vec![1.0, 2.0], vec![0.0, 0.0], 1.0, 4.0).unwrap();
        let xw = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 3.0, 3.0]);
        let mu = conditional_location(&theta, &[10.0, 20.0], &[1.0, 0.5], &xw).unwrap();
        assert_eq!(mu, 2.0);

        let theta = Theta::new(vec![0.0], vec![0.5], 1.0, 4.0).unwrap();
        let mu = conditional_location(&theta, &[2.0], &[7.0], &DMatrix::from_element(1, 1, 3.0))
            .unwrap();
        assert_eq!(mu, 1.0);
    }

    #[test]
    fn location_p2_expansion() {
        // μ = x_tβ + φ1 (y1 − x1β) + φ2 (y2 − x2β), expanded by hand
        let theta = Theta::new(vec![2.0, -1.0], vec![0.3, -0.6], 1.0, 4.0).unwrap();
        let x_t = [1.0, 0.5];
        let xw = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 1.0, -1.0]);
        let yw = [4.0, 1.5];
        let expect = (2.0 - 0.5) + 0.3 * (4.0 - (2.0 - 2.0)) + (-0.6) * (1.5 - (2.0 + 1.0));
        let mu = conditional_location(&theta, &yw, &x_t, &xw).unwrap();
        assert!((mu - expect).abs() < 1e-14);
        assert!(conditional_location(&theta, &[1.0], &x_t, &xw).is_err());
    }

    #[test]
    fn series_invariants_enforced() {
        let x = DMatrix::from_element(3, 1, 1.0);
        let ok = CensoredSeries::new(
            vec![1.0, f64::NAN, 2.0],
            vec![1.0, f64::NEG_INFINITY, 2.0],
            vec![1.0, 0.5, 2.0],
            vec![false, true, false],
            x.clone(),
        );
        assert!(ok.is_ok());
        let point = CensoredSeries::new(
            vec![1.0, 0.5, 2.0],
            vec![1.0, 0.5, 2.0],
            vec![1.0, 0.5, 2.0],
            vec![false, true, false],
            x.clone(),
        );
        assert!(point.is_err());
        let mismatch = CensoredSeries::new(
            vec![1.0, 0.5, 2.0],
            vec![0.0, 0.5, 2.0],
            vec![1.0, 0.5, 2.0],
            vec![false, false, false],
            x.clone(),
        );
        assert!(mismatch.is_err());
        let s = ok.unwrap();
        assert!(s.check_first_p(1).is_ok());
        assert!(s.check_first_p(2).is_err());
    }

    #[test]
    fn theta_roundtrip_and_validation() {
        let th = Theta::new(vec![1.0, 2.0], vec![0.1], 2.0, 5.0).unwrap();
        let v = th.to_vec();
        assert_eq!(v, vec![1.0, 2.0, 0.1, 2.0, 5.0]);
        assert_eq!(Theta::from_slice(th.spec(), &v).unwrap(), th);
        assert!(Theta::new(vec![1.0], vec![0.1], 0.0, 5.0).is_err());
        assert!(Theta::new(vec![1.0], vec![0.1], 1.0, 0.0).is_err());
        assert!(ModelSpec::new(0, 1).is_err());
        assert_eq!(
            ModelSpec::new(2, 1).unwrap().parameter_names(),
            vec!["beta0", "phi1", "phi2", "sigma2", "nu"]
        );
    }
}

//! The SAEM estimator: stochastic-approximation sufficient statistics,
//! closed-form conditional maximization and the ν update, with Louis
//! information accumulated alongside.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{louis_update, observed_information, standard_errors, LouisAccumulators};
use crate::linalg::Cholesky;
use crate::model::{CensoredSeries, ModelSpec, Theta};
use crate::sampler::{draw_latent_block, GibbsBackend, LatentDraw, LatentState, RngStream};
use crate::special::ln_gamma;

/// Positivity floor applied to σ² after every CM step.
pub const SIGMA2_FLOOR: f64 = 1e-12;

const NU_TOL: f64 = 1e-6;
const NU_START: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaemConfig {
    /// Monte Carlo draws per iteration (M).
    pub m: usize,
    /// Maximum number of iterations (W).
    pub max_iter: usize,
    /// Fraction of W run without memory (c).
    pub cutoff: f64,
    /// Gibbs sweeps over the censored block per draw.
    pub inner_sweeps: usize,
    pub tol: f64,
    pub patience: usize,
    pub nu_bounds: (f64, f64),
    pub seed: u64,
    pub stream_id: u64,
    pub backend: GibbsBackend,
}

impl Default for SaemConfig {
    fn default() -> Self {
        SaemConfig {
            m: 20,
            max_iter: 400,
            cutoff: 0.25,
            inner_sweeps: 5,
            tol: 1e-4,
            patience: 3,
            nu_bounds: (1.01, 150.0),
            seed: 0,
            stream_id: 0,
            backend: GibbsBackend::Banded,
        }
    }
}

impl SaemConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.nu_bounds;
        if self.m == 0 || self.max_iter == 0 || self.inner_sweeps == 0 || self.patience == 0 {
            return Err(Error::domain("M, W, inner sweeps and patience must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.cutoff) {
            return Err(Error::domain(format!("cutoff {} outside [0, 1]", self.cutoff)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::domain("tolerance must be positive"));
        }
        if !(lo > 0.0 && lo < hi && hi.is_finite()) {
            return Err(Error::domain(format!("invalid nu bounds ({lo}, {hi})")));
        }
        Ok(())
    }

    /// Number of memoryless iterations, ⌊cW⌋.
    pub fn memoryless_iters(&self) -> usize {
        memoryless(self.cutoff, self.max_iter)
    }
}

fn memoryless(c: f64, w: usize) -> usize {
    (c * w as f64).floor() as usize
}

/// δ_k: 1 during the first ⌊cW⌋ iterations, then 1/(k − ⌊cW⌋).
pub fn smoothing_weight(k: usize, c: f64, w: usize) -> Result<f64> {
    if k == 0 || k > w {
        return Err(Error::domain(format!("iteration {k} outside 1..={w}")));
    }
    if !(0.0..=1.0).contains(&c) {
        return Err(Error::domain(format!("cutoff {c} outside [0, 1]")));
    }
    let cw = memoryless(c, w);
    Ok(if k <= cw { 1.0 } else { 1.0 / (k - cw) as f64 })
}

/// Running stochastic approximations of the complete-data statistics.
///
/// Per-observation entries are indexed from time p (entry i is time p + i).
#[derive(Debug, Clone, PartialEq)]
pub struct SuffStats {
    pub u_hat: DVector<f64>,
    /// Σ log u_i.
    pub logu_hat: f64,
    /// Σ u_i y_i².
    pub uy2_hat: f64,
    /// u_i y_i per observation.
    pub uy_hat: DVector<f64>,
    /// Σ u_i y_i y_(i,p).
    pub uyy_hat: DVector<f64>,
    /// u_i y_(i,p)ᵀ per observation (row i).
    pub uyvec_hat: DMatrix<f64>,
    /// Σ u_i y_(i,p) y_(i,p)ᵀ.
    pub uy2mat_hat: DMatrix<f64>,
    /// Running imputation of the censored values.
    pub ym_hat: DVector<f64>,
}

impl SuffStats {
    pub fn zeros(n_obs: usize, p: usize, n_censored: usize) -> Self {
        SuffStats {
            u_hat: DVector::zeros(n_obs),
            logu_hat: 0.0,
            uy2_hat: 0.0,
            uy_hat: DVector::zeros(n_obs),
            uyy_hat: DVector::zeros(p),
            uyvec_hat: DMatrix::zeros(n_obs, p),
            uy2mat_hat: DMatrix::zeros(p, p),
            ym_hat: DVector::zeros(n_censored),
        }
    }

    pub fn p(&self) -> usize {
        self.uyy_hat.len()
    }

    pub fn n_obs(&self) -> usize {
        self.u_hat.len()
    }

    /// Plain average of the statistics over the draws. `censored` lists the
    /// 0-based series indices whose values feed `ym_hat`.
    pub fn mc_mean(draws: &[LatentDraw], p: usize, censored: &[usize]) -> Result<Self> {
        let first = draws
            .first()
            .ok_or_else(|| Error::domain("need at least one draw"))?;
        let n = first.y_full.len();
        if n < p || first.u.len() != n - p {
            return Err(Error::domain("draw dimensions are inconsistent"));
        }
        let m = n - p;
        let mut s = SuffStats::zeros(m, p, censored.len());
        let mut win = vec![0.0; p];
        for d in draws {
            if d.y_full.len() != n || d.u.len() != m {
                return Err(Error::domain("draws have differing lengths"));
            }
            let y = &d.y_full;
            for i in 0..m {
                let t = p + i;
                let u = d.u[i];
                for j in 0..p {
                    win[j] = y[t - 1 - j];
                }
                s.u_hat[i] += u;
                s.logu_hat += u.ln();
                s.uy2_hat += u * y[t] * y[t];
                s.uy_hat[i] += u * y[t];
                for j in 0..p {
                    s.uyy_hat[j] += u * y[t] * win[j];
                    s.uyvec_hat[(i, j)] += u * win[j];
                    for k in 0..p {
                        s.uy2mat_hat[(j, k)] += u * win[j] * win[k];
                    }
                }
            }
            for (c, &t) in censored.iter().enumerate() {
                s.ym_hat[c] += y[t];
            }
        }
        s.scale(1.0 / draws.len() as f64);
        Ok(s)
    }

    fn scale(&mut self, f: f64) {
        self.u_hat *= f;
        self.logu_hat *= f;
        self.uy2_hat *= f;
        self.uy_hat *= f;
        self.uyy_hat *= f;
        self.uyvec_hat *= f;
        self.uy2mat_hat *= f;
        self.ym_hat *= f;
    }

    fn check_shape(&self, other: &SuffStats) -> Result<()> {
        if self.u_hat.len() != other.u_hat.len()
            || self.uyy_hat.len() != other.uyy_hat.len()
            || self.ym_hat.len() != other.ym_hat.len()
        {
            return Err(Error::domain("sufficient statistics have different shapes"));
        }
        Ok(())
    }
}

/// s ← s + δ(mean over draws − s) for every statistic; δ = 1 assigns the
/// Monte Carlo mean exactly.
pub fn sa_update(
    prev: &SuffStats,
    draws: &[LatentDraw],
    censored: &[usize],
    delta: f64,
) -> Result<SuffStats> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::domain(format!("step size {delta} outside (0, 1]")));
    }
    let mean = SuffStats::mc_mean(draws, prev.p(), censored)?;
    prev.check_shape(&mean)?;
    if delta == 1.0 {
        return Ok(mean);
    }
    let mix_v = |a: &DVector<f64>, b: &DVector<f64>| a + (b - a) * delta;
    let mix_m = |a: &DMatrix<f64>, b: &DMatrix<f64>| a + (b - a) * delta;
    Ok(SuffStats {
        u_hat: mix_v(&prev.u_hat, &mean.u_hat),
        logu_hat: prev.logu_hat + delta * (mean.logu_hat - prev.logu_hat),
        uy2_hat: prev.uy2_hat + delta * (mean.uy2_hat - prev.uy2_hat),
        uy_hat: mix_v(&prev.uy_hat, &mean.uy_hat),
        uyy_hat: mix_v(&prev.uyy_hat, &mean.uyy_hat),
        uyvec_hat: mix_m(&prev.uyvec_hat, &mean.uyvec_hat),
        uy2mat_hat: mix_m(&prev.uy2mat_hat, &mean.uy2mat_hat),
        ym_hat: mix_v(&prev.ym_hat, &mean.ym_hat),
    })
}

/// Statistics re-centred at β: approximations of Σ u(y_i − x_iᵀβ)²,
/// Σ u(y_i − x_iᵀβ)(y_(i,p) − X_(i,p)β) and Σ u(y_(i,p) − X_(i,p)β)(·)ᵀ.
pub fn starred_stats(
    stats: &SuffStats,
    beta: &DVector<f64>,
    x: &DMatrix<f64>,
) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
    let p = stats.p();
    let m = stats.n_obs();
    if x.nrows() != m + p || x.ncols() != beta.len() {
        return Err(Error::domain("covariates do not match the statistics"));
    }
    let xb = x * beta;
    let mut uy2 = stats.uy2_hat;
    let mut uyy = stats.uyy_hat.clone();
    let mut uy2mat = stats.uy2mat_hat.clone();
    let mut wb = vec![0.0; p];
    for i in 0..m {
        let t = p + i;
        let u = stats.u_hat[i];
        let uy = stats.uy_hat[i];
        let b = xb[t];
        for j in 0..p {
            wb[j] = xb[t - 1 - j];
        }
        uy2 -= 2.0 * uy * b - u * b * b;
        for j in 0..p {
            let uyv_j = stats.uyvec_hat[(i, j)];
            uyy[j] -= uy * wb[j] + uyv_j * b - u * wb[j] * b;
            for k in 0..p {
                let uyv_k = stats.uyvec_hat[(i, k)];
                uy2mat[(j, k)] -= uyv_j * wb[k] + wb[j] * uyv_k - u * wb[j] * wb[k];
            }
        }
    }
    Ok((uy2, uyy, uy2mat))
}

/// ĝ(ν | u): the ν-dependent part of the approximated Q-function.
pub fn g_nu(nu: f64, logu_hat: f64, u_hat_sum: f64, m: usize) -> f64 {
    let half = 0.5 * nu;
    0.5 * m as f64 * (nu * half.ln() - 2.0 * ln_gamma(half)) + half * (logu_hat - u_hat_sum)
}

/// Maximizer of [`g_nu`] over `bounds` by golden-section search; returns the
/// bound itself when the search settles against it.
pub fn maximize_nu(logu_hat: f64, u_hat_sum: f64, m: usize, bounds: (f64, f64)) -> f64 {
    let (lo, hi) = bounds;
    let f = |v: f64| g_nu(v, logu_hat, u_hat_sum, m);
    let inv_phi = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > NU_TOL {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    if x - lo <= NU_TOL && f(lo) >= f(x) {
        lo
    } else if hi - x <= NU_TOL && f(hi) >= f(x) {
        hi
    } else {
        x
    }
}

/// Conditional maximization in the order φ → σ² → β → ν.
pub fn cm_step(
    stats: &SuffStats,
    theta_prev: &Theta,
    x: &DMatrix<f64>,
    nu_bounds: (f64, f64),
) -> Result<Theta> {
    let p = stats.p();
    let m = stats.n_obs();
    let q = theta_prev.q();
    if theta_prev.p() != p {
        return Err(Error::domain("parameter order does not match the statistics"));
    }
    let (uy2s, uyys, uy2mats) = starred_stats(stats, &theta_prev.beta, x)?;

    let phi = Cholesky::factor_normal_equations(&uy2mats)?.solve_vec(&uyys);

    let quad = uy2s - 2.0 * phi.dot(&uyys) + (phi.transpose() * &uy2mats * &phi)[(0, 0)];
    let sigma2 = (quad / m as f64).max(SIGMA2_FLOOR);

    let mut lhs = DMatrix::<f64>::zeros(q, q);
    let mut rhs = DVector::<f64>::zeros(q);
    let mut alpha = DVector::<f64>::zeros(q);
    for i in 0..m {
        let t = p + i;
        for c in 0..q {
            alpha[c] = x[(t, c)] - (0..p).map(|j| phi[j] * x[(t - 1 - j, c)]).sum::<f64>();
        }
        let target =
            stats.uy_hat[i] - (0..p).map(|j| phi[j] * stats.uyvec_hat[(i, j)]).sum::<f64>();
        lhs += &alpha * alpha.transpose() * stats.u_hat[i];
        rhs += &alpha * target;
    }
    let beta = Cholesky::factor_normal_equations(&lhs)?.solve_vec(&rhs);

    let nu = maximize_nu(stats.logu_hat, stats.u_hat.sum(), m, nu_bounds);
    Ok(Theta {
        beta,
        phi,
        sigma2,
        nu,
    })
}

/// Q̂(θ) assembled from the statistics, up to θ-free constants.
pub fn q_hat(stats: &SuffStats, theta: &Theta, x: &DMatrix<f64>) -> Result<f64> {
    let m = stats.n_obs();
    let (uy2s, uyys, uy2mats) = starred_stats(stats, &theta.beta, x)?;
    let phi = &theta.phi;
    let quad = uy2s - 2.0 * phi.dot(&uyys) + (phi.transpose() * &uy2mats * phi)[(0, 0)];
    Ok(g_nu(theta.nu, stats.logu_hat, stats.u_hat.sum(), m)
        - 0.5 * m as f64 * theta.sigma2.ln()
        - quad / (2.0 * theta.sigma2))
}

/// Deterministic starting point and the initial completed series.
///
/// Censored values are replaced by the nearest finite bound (the interval
/// midpoint when both are finite, the median of observed values when neither
/// is). β comes from least squares, φ from Yule–Walker on the residuals and
/// σ² from the implied innovation variance.
pub fn initialize(
    data: &CensoredSeries,
    spec: ModelSpec,
    nu_bounds: (f64, f64),
) -> Result<(Theta, Vec<f64>)> {
    let n = data.len();
    let (p, q) = (spec.p, spec.q);
    let mut observed: Vec<f64> = (0..n).filter(|&t| !data.cens[t]).map(|t| data.y[t]).collect();
    observed.sort_by(f64::total_cmp);
    let median = if observed.is_empty() {
        0.0
    } else if observed.len() % 2 == 1 {
        observed[observed.len() / 2]
    } else {
        0.5 * (observed[observed.len() / 2 - 1] + observed[observed.len() / 2])
    };
    let y0: Vec<f64> = (0..n)
        .map(|t| {
            if !data.cens[t] {
                return data.y[t];
            }
            let (lo, hi) = (data.lower[t], data.upper[t]);
            match (lo.is_finite(), hi.is_finite()) {
                (true, true) => 0.5 * (lo + hi),
                (true, false) => lo,
                (false, true) => hi,
                (false, false) => median.clamp(lo, hi),
            }
        })
        .collect();

    let yv = DVector::from_column_slice(&y0);
    let xtx = data.x.transpose() * &data.x;
    let beta = Cholesky::factor_normal_equations(&xtx)?.solve_vec(&(data.x.transpose() * &yv));
    let resid = yv - &data.x * &beta;

    let gamma: Vec<f64> = (0..=p)
        .map(|k| (k..n).map(|t| resid[t] * resid[t - k]).sum::<f64>() / n as f64)
        .collect();
    let mut phi = DVector::zeros(p);
    let mut sigma2 = gamma[0];
    if gamma[0] > 0.0 {
        let toeplitz = DMatrix::from_fn(p, p, |i, j| gamma[i.abs_diff(j)]);
        let rhs = DVector::from_fn(p, |i, _| gamma[i + 1]);
        if let Ok(ch) = Cholesky::factor_normal_equations(&toeplitz) {
            phi = ch.solve_vec(&rhs);
            sigma2 = gamma[0] - phi.dot(&rhs);
        }
    }
    let theta = Theta {
        beta,
        phi,
        sigma2: sigma2.max(SIGMA2_FLOOR),
        nu: NU_START.clamp(nu_bounds.0, nu_bounds.1),
    };
    debug_assert_eq!(theta.q(), q);
    Ok((theta, y0))
}

/// Diagnostics of a single iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationReport {
    pub iteration: usize,
    pub delta: f64,
    pub theta: Theta,
    /// Q̂ at the previous and the updated parameters, both from this
    /// iteration's statistics.
    pub q_before: f64,
    pub q_after: f64,
    pub max_rel_change: f64,
}

/// Stepwise SAEM runner.
#[derive(Debug, Clone)]
pub struct Saem<'a> {
    data: &'a CensoredSeries,
    spec: ModelSpec,
    config: SaemConfig,
    theta: Theta,
    stats: SuffStats,
    state: LatentState,
    louis: LouisAccumulators,
    rng: RngStream,
    iteration: usize,
    streak: usize,
    converged: bool,
    trace: Vec<Vec<f64>>,
}

impl<'a> Saem<'a> {
    pub fn new(data: &'a CensoredSeries, spec: ModelSpec, config: SaemConfig) -> Result<Self> {
        config.validate()?;
        if data.n_covariates() != spec.q {
            return Err(Error::domain(format!(
                "data has {} covariates but the model expects {}",
                data.n_covariates(),
                spec.q
            )));
        }
        spec.check_length(data.len())?;
        data.check_first_p(spec.p)?;
        let (theta, y0) = initialize(data, spec, config.nu_bounds)?;
        let state = LatentState::new(data, spec.p, y0)?;
        let ym0: Vec<f64> = state.censored().iter().map(|&t| state.y_full[t]).collect();
        let mut stats = SuffStats::zeros(data.len() - spec.p, spec.p, ym0.len());
        stats.ym_hat = DVector::from_vec(ym0);
        let rng = RngStream::new(config.seed, config.stream_id);
        Ok(Saem {
            data,
            spec,
            louis: LouisAccumulators::new(spec.n_params()),
            config,
            theta,
            stats,
            state,
            rng,
            iteration: 0,
            streak: 0,
            converged: false,
            trace: Vec::new(),
        })
    }

    pub fn theta(&self) -> &Theta {
        &self.theta
    }

    pub fn stats(&self) -> &SuffStats {
        &self.stats
    }

    pub fn louis(&self) -> &LouisAccumulators {
        &self.louis
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    pub fn finished(&self) -> bool {
        self.converged || self.iteration >= self.config.max_iter
    }

    pub fn step(&mut self) -> Result<IterationReport> {
        if self.finished() {
            return Err(Error::domain("the run has already finished"));
        }
        let k = self.iteration + 1;
        let cfg = &self.config;
        let delta = smoothing_weight(k, cfg.cutoff, cfg.max_iter)?;
        let x = &self.data.x;
        let draws = draw_latent_block(
            &self.theta,
            self.data,
            &mut self.state,
            cfg.m,
            cfg.inner_sweeps,
            cfg.backend,
            &mut self.rng,
        )
        .map_err(|e| e.at_iteration(k))?;
        self.stats = sa_update(&self.stats, &draws, self.state.censored(), delta)
            .map_err(|e| e.at_iteration(k))?;
        louis_update(&mut self.louis, &draws, &self.theta, x, delta)
            .map_err(|e| e.at_iteration(k))?;
        let next = cm_step(&self.stats, &self.theta, x, cfg.nu_bounds).map_err(|e| {
            Error::Estimation {
                iteration: k,
                message: e.to_string(),
            }
        })?;
        let q_before = q_hat(&self.stats, &self.theta, x)?;
        let q_after = q_hat(&self.stats, &next, x)?;

        let change = self
            .theta
            .to_vec()
            .iter()
            .zip(next.to_vec())
            .map(|(old, new)| (new - old).abs() / (old.abs() + 1e-3))
            .fold(0.0, f64::max);
        if k > cfg.memoryless_iters() && change < cfg.tol {
            self.streak += 1;
        } else {
            self.streak = 0;
        }
        self.converged = self.streak >= cfg.patience;
        self.iteration = k;
        self.theta = next;
        self.trace.push(self.theta.to_vec());
        Ok(IterationReport {
            iteration: k,
            delta,
            theta: self.theta.clone(),
            q_before,
            q_after,
            max_rel_change: change,
        })
    }

    pub fn run(mut self) -> Result<FitResult> {
        while !self.finished() {
            self.step()?;
        }
        Ok(self.into_result())
    }

    pub fn into_result(self) -> FitResult {
        let info = observed_information(&self.louis);
        let d = self.spec.n_params();
        let std_errors = standard_errors(&info).unwrap_or_else(|_| vec![None; d]);
        let censored = self.state.censored().to_vec();
        let mut y_complete = self.data.y.clone();
        let imputed: Vec<(usize, f64)> = censored
            .iter()
            .enumerate()
            .map(|(c, &t)| (t, self.stats.ym_hat[c]))
            .collect();
        for &(t, v) in &imputed {
            y_complete[t] = v;
        }
        let (lo, hi) = self.config.nu_bounds;
        let nu = self.theta.nu;
        FitResult {
            spec: self.spec,
            nu_fragile: nu <= lo * 1.05 || nu >= hi * 0.95,
            theta: self.theta,
            std_errors,
            info_matrix: info,
            imputed,
            y_complete,
            u_hat: self.stats.u_hat.iter().copied().collect(),
            theta_trace: self.trace,
            iterations_run: self.iteration,
            converged: self.converged,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub spec: ModelSpec,
    pub theta: Theta,
    /// Standard errors in (β, φ, σ², ν) order; `None` where undefined.
    pub std_errors: Vec<Option<f64>>,
    pub info_matrix: DMatrix<f64>,
    /// (0-based series index, imputed value) for every censored entry.
    pub imputed: Vec<(usize, f64)>,
    /// The data with censored entries replaced by their imputations.
    pub y_complete: Vec<f64>,
    /// Final û_i for times p..n.
    pub u_hat: Vec<f64>,
    pub theta_trace: Vec<Vec<f64>>,
    pub iterations_run: usize,
    pub converged: bool,
    /// ν̂ lies within 5% of a bound, where its Wald interval is unreliable.
    pub nu_fragile: bool,
}

pub fn fit(data: &CensoredSeries, spec: ModelSpec, config: SaemConfig) -> Result<FitResult> {
    Saem::new(data, spec, config)?.run()
}

//! Random draws for the E-step: seeded streams, Gamma and truncated normal
//! variates, and the chained latent-data Gibbs sampler.

use nalgebra::{DMatrix, DVector};
use rand::distr::Open01;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conditional::{
    conditional_gaussian_moments, coordinate_conditional, gamma_params, partition_and_condition,
};
use crate::error::{Error, Result};
use crate::linalg::Cholesky;
use crate::model::{location_at, CensoredSeries, Theta};
use crate::special::{normal_cdf, normal_quantile};

/// A reproducible random stream identified by `(seed, stream_id)`.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        RngStream {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

#[inline]
fn open01<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(Open01)
}

#[inline]
fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Gamma(shape, rate) draw by the Marsaglia–Tsang squeeze method.
pub fn sample_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> Result<f64> {
    if !(shape > 0.0) || !(rate > 0.0) || !shape.is_finite() || !rate.is_finite() {
        return Err(Error::domain(format!(
            "gamma needs positive finite shape and rate, got ({shape}, {rate})"
        )));
    }
    Ok(gamma_unit(shape, rng) / rate)
}

fn gamma_unit<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    if shape < 1.0 {
        let g = gamma_unit(shape + 1.0, rng);
        return g * open01(rng).powf(1.0 / shape);
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x = std_normal(rng);
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u = open01(rng);
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 || u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            return d * v;
        }
    }
}

/// Standardized bound beyond which the exponential-proposal tail sampler
/// replaces inversion.
const TAIL_CUTOFF: f64 = 5.0;

/// Draw from N(mu, sigma2) restricted to [a, b].
pub fn sample_truncated_normal_1d<R: Rng + ?Sized>(
    mu: f64,
    sigma2: f64,
    a: f64,
    b: f64,
    rng: &mut R,
) -> Result<f64> {
    if !(sigma2 > 0.0) || !mu.is_finite() || !sigma2.is_finite() {
        return Err(Error::domain(format!(
            "truncated normal needs finite mu and positive finite sigma2, got ({mu}, {sigma2})"
        )));
    }
    if !(a < b) {
        return Err(Error::domain(format!("truncation interval [{a}, {b}] is empty")));
    }
    let sd = sigma2.sqrt();
    let alpha = (a - mu) / sd;
    let beta = (b - mu) / sd;
    let z = standard_truncated(alpha, beta, rng);
    Ok((mu + sd * z).clamp(a, b))
}

fn standard_truncated<R: Rng + ?Sized>(alpha: f64, beta: f64, rng: &mut R) -> f64 {
    if alpha == f64::NEG_INFINITY && beta == f64::INFINITY {
        return std_normal(rng);
    }
    if alpha >= TAIL_CUTOFF {
        return tail_truncated(alpha, beta, rng);
    }
    if beta <= -TAIL_CUTOFF {
        return -tail_truncated(-beta, -alpha, rng);
    }
    // invert on the side where the CDF keeps relative precision
    if alpha > 0.0 {
        return -inverse_cdf_truncated(-beta, -alpha, rng);
    }
    inverse_cdf_truncated(alpha, beta, rng)
}

fn inverse_cdf_truncated<R: Rng + ?Sized>(alpha: f64, beta: f64, rng: &mut R) -> f64 {
    let pa = normal_cdf(alpha);
    let pb = normal_cdf(beta);
    let p = pa + open01(rng) * (pb - pa);
    normal_quantile(p).clamp(alpha, beta)
}

/// Robert's sampler for [alpha, beta] with alpha > 0 far in the upper tail.
fn tail_truncated<R: Rng + ?Sized>(alpha: f64, beta: f64, rng: &mut R) -> f64 {
    let lambda = 0.5 * (alpha + (alpha * alpha + 4.0).sqrt());
    if beta.is_finite() && lambda * (beta - alpha) < 1.0 {
        let width = beta - alpha;
        loop {
            let z = alpha + width * open01(rng);
            if open01(rng).ln() <= 0.5 * (alpha * alpha - z * z) {
                return z;
            }
        }
    }
    loop {
        let z = alpha - open01(rng).ln() / lambda;
        if z > beta {
            continue;
        }
        let d = z - lambda;
        if open01(rng).ln() <= -0.5 * d * d {
            return z;
        }
    }
}

/// Coordinate Gibbs sampler for N(mu, sigma) truncated to the box
/// [lower, upper], run for `sweeps` full sweeps from `init`.
pub fn sample_truncated_mvn_gibbs<R: Rng + ?Sized>(
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    lower: &[f64],
    upper: &[f64],
    init: &DVector<f64>,
    sweeps: usize,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let d = mu.len();
    if sigma.nrows() != d || sigma.ncols() != d || lower.len() != d || upper.len() != d {
        return Err(Error::domain("truncated MVN dimensions disagree"));
    }
    if init.len() != d || (0..d).any(|i| !(lower[i] <= init[i] && init[i] <= upper[i])) {
        return Err(Error::domain("Gibbs initial state lies outside the truncation box"));
    }
    let mut x = init.clone();
    if d == 0 {
        return Ok(x);
    }
    if d == 1 {
        for _ in 0..sweeps {
            x[0] = sample_truncated_normal_1d(mu[0], sigma[(0, 0)], lower[0], upper[0], rng)?;
        }
        return Ok(x);
    }
    let precision = Cholesky::factor_covariance(sigma)?.inverse();
    for _ in 0..sweeps {
        for i in 0..d {
            let qii = precision[(i, i)];
            let mut shift = 0.0;
            for j in 0..d {
                if j != i {
                    shift += precision[(i, j)] * (x[j] - mu[j]);
                }
            }
            let mean = mu[i] - shift / qii;
            x[i] = sample_truncated_normal_1d(mean, 1.0 / qii, lower[i], upper[i], rng)?;
        }
    }
    Ok(x)
}

/// One completed draw of the latent data.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDraw {
    /// Observed values merged with sampled censored values (length n).
    pub y_full: Vec<f64>,
    /// Mixing weights for times p..n (length n − p).
    pub u: Vec<f64>,
}

/// How censored values are redrawn given the weights.
///
/// Both backends run coordinate Gibbs on the same target. `Banded` reads each
/// coordinate's full conditional off the at most p + 1 density factors it
/// enters; `Dense` assembles Σ̃, conditions on the observed block and
/// samples the censored block from the resulting covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GibbsBackend {
    #[default]
    Banded,
    Dense,
}

/// The persistent state of the latent chain.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub y_full: Vec<f64>,
    pub u: Vec<f64>,
    censored: Vec<usize>,
}

impl LatentState {
    /// `y_init` must agree with the data at observed times and sit inside the
    /// censoring interval elsewhere; the weights start at 1.
    pub fn new(data: &CensoredSeries, p: usize, y_init: Vec<f64>) -> Result<Self> {
        data.check_first_p(p)?;
        let n = data.len();
        if y_init.len() != n {
            return Err(Error::domain("initial series has the wrong length"));
        }
        for t in 0..n {
            let ok = if data.cens[t] {
                data.lower[t] <= y_init[t] && y_init[t] <= data.upper[t] && y_init[t].is_finite()
            } else {
                y_init[t] == data.y[t]
            };
            if !ok {
                return Err(Error::domain(format!(
                    "initial value {} at time {t} violates the data",
                    y_init[t]
                )));
            }
        }
        Ok(LatentState {
            y_full: y_init,
            u: vec![1.0; n - p],
            censored: (p..n).filter(|&t| data.cens[t]).collect(),
        })
    }

    /// 0-based series indices of the censored entries.
    pub fn censored(&self) -> &[usize] {
        &self.censored
    }

    fn snapshot(&self) -> LatentDraw {
        LatentDraw {
            y_full: self.y_full.clone(),
            u: self.u.clone(),
        }
    }
}

/// Runs `m` rounds of (censored block | u) then (u | completed series),
/// continuing the chain held in `state`, and returns every round's draw.
#[allow(clippy::too_many_arguments)]
pub fn draw_latent_block<R: Rng + ?Sized>(
    theta: &Theta,
    data: &CensoredSeries,
    state: &mut LatentState,
    m: usize,
    inner_sweeps: usize,
    backend: GibbsBackend,
    rng: &mut R,
) -> Result<Vec<LatentDraw>> {
    let p = theta.p();
    let n = data.len();
    if data.n_covariates() != theta.q() || state.y_full.len() != n || state.u.len() + p != n {
        return Err(Error::domain("latent state does not match the data and parameters"));
    }
    let xb: Vec<f64> = data.linear_predictor(&theta.beta).iter().copied().collect();
    let mut draws = Vec::with_capacity(m);
    for _ in 0..m {
        if !state.censored.is_empty() {
            match backend {
                GibbsBackend::Banded => banded_sweeps(theta, data, state, &xb, inner_sweeps, rng)?,
                GibbsBackend::Dense => dense_sweeps(theta, data, state, inner_sweeps, rng)?,
            }
        }
        for t in p..n {
            let resid = state.y_full[t] - location_at(&theta.phi, &state.y_full, &xb, t);
            let (shape, rate) = gamma_params(theta.nu, theta.sigma2, resid);
            state.u[t - p] = sample_gamma(shape, rate, rng)?;
        }
        debug_assert!(box_invariants_hold(data, &state.y_full));
        draws.push(state.snapshot());
    }
    Ok(draws)
}

fn banded_sweeps<R: Rng + ?Sized>(
    theta: &Theta,
    data: &CensoredSeries,
    state: &mut LatentState,
    xb: &[f64],
    sweeps: usize,
    rng: &mut R,
) -> Result<()> {
    for _ in 0..sweeps {
        for &t in &state.censored {
            let (mean, var) =
                coordinate_conditional(&theta.phi, theta.sigma2, &state.u, &state.y_full, xb, t);
            state.y_full[t] =
                sample_truncated_normal_1d(mean, var, data.lower[t], data.upper[t], rng)?;
        }
    }
    Ok(())
}

fn dense_sweeps<R: Rng + ?Sized>(
    theta: &Theta,
    data: &CensoredSeries,
    state: &mut LatentState,
    sweeps: usize,
    rng: &mut R,
) -> Result<()> {
    let p = theta.p();
    let n = data.len();
    let gc = conditional_gaussian_moments(theta, &state.u, &data.y[..p], &data.x)?;
    let mask: Vec<bool> = data.cens[p..].to_vec();
    let observed: Vec<f64> = (p..n).filter(|&t| !data.cens[t]).map(|t| data.y[t]).collect();
    let pc = partition_and_condition(&gc, &mask, &observed)?;
    let cens = &state.censored;
    let lower: Vec<f64> = cens.iter().map(|&t| data.lower[t]).collect();
    let upper: Vec<f64> = cens.iter().map(|&t| data.upper[t]).collect();
    let init = DVector::from_iterator(cens.len(), cens.iter().map(|&t| state.y_full[t]));
    let ym = sample_truncated_mvn_gibbs(
        &pc.mu_star,
        &pc.sigma_star,
        &lower,
        &upper,
        &init,
        sweeps,
        rng,
    )?;
    for (i, &t) in cens.iter().enumerate() {
        state.y_full[t] = ym[i];
    }
    Ok(())
}

fn box_invariants_hold(data: &CensoredSeries, y_full: &[f64]) -> bool {
    (0..data.len()).all(|t| {
        if data.cens[t] {
            data.lower[t] <= y_full[t] && y_full[t] <= data.upper[t]
        } else {
            y_full[t] == data.y[t]
        }
    })
}

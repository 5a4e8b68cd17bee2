//! Monte Carlo machinery: data generation, limit-of-detection censoring with
//! missing injection, the outlier-perturbation protocol and replicate
//! summaries.

use nalgebra::DMatrix;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::confidence_interval;
use crate::model::{CensoredSeries, ModelSpec, Theta};
use crate::saem::{fit, SaemConfig};
use crate::sampler::{sample_gamma, RngStream};

pub const DEFAULT_BURNIN: usize = 200;
const MAX_ATTEMPTS: usize = 100;

/// Generates y_t = x_tᵀβ + ξ_t with AR(p) errors driven by t(0, σ², ν)
/// innovations (Gaussian when ν is infinite), discarding `burnin` warm-up
/// values of ξ.
pub fn simulate_cart<R: Rng + ?Sized>(
    theta: &Theta,
    x: &DMatrix<f64>,
    burnin: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !theta.is_stationary() {
        return Err(Error::domain("cannot simulate from a nonstationary phi"));
    }
    if x.ncols() != theta.q() {
        return Err(Error::domain("covariate columns do not match beta"));
    }
    let n = x.nrows();
    let p = theta.p();
    let sd = theta.sigma2.sqrt();
    let total = burnin + n;
    let mut xi = vec![0.0; p + total];
    for t in p..p + total {
        let z: f64 = rng.sample(StandardNormal);
        let scale = if theta.nu.is_finite() {
            sample_gamma(0.5 * theta.nu, 0.5 * theta.nu, rng)?.sqrt()
        } else {
            1.0
        };
        let ar: f64 = (0..p).map(|j| theta.phi[j] * xi[t - 1 - j]).sum();
        xi[t] = ar + sd * z / scale;
    }
    let xb = x * &theta.beta;
    Ok((0..n).map(|t| xb[t] + xi[p + burnin + t]).collect())
}

/// Left-censors every value at or below `lod` to (−∞, lod] and turns a
/// uniformly chosen `missing_frac` share of those into missing values.
///
/// Fails with a precondition error when any of the first `p` values would be
/// censored.
pub fn apply_censoring<R: Rng + ?Sized>(
    y: &[f64],
    x: DMatrix<f64>,
    lod: f64,
    missing_frac: f64,
    p: usize,
    rng: &mut R,
) -> Result<CensoredSeries> {
    if !(0.0..=1.0).contains(&missing_frac) {
        return Err(Error::domain(format!("missing fraction {missing_frac} outside [0, 1]")));
    }
    let n = y.len();
    let censored: Vec<usize> = (0..n).filter(|&t| y[t] <= lod).collect();
    if let Some(&t) = censored.first() {
        if t < p {
            return Err(Error::Precondition(format!(
                "value at time {t} falls below the detection limit within the first p = {p}"
            )));
        }
    }
    let mut yy = y.to_vec();
    let mut lower = y.to_vec();
    let mut upper = y.to_vec();
    let mut cens = vec![false; n];
    for &t in &censored {
        cens[t] = true;
        yy[t] = lod;
        lower[t] = f64::NEG_INFINITY;
        upper[t] = lod;
    }
    let n_missing = (missing_frac * censored.len() as f64).round() as usize;
    if n_missing > 0 {
        for k in sample_indices(rng, censored.len(), n_missing).into_iter() {
            let t = censored[k];
            yy[t] = f64::NAN;
            upper[t] = f64::INFINITY;
        }
    }
    CensoredSeries::new(yy, lower, upper, cens, x)
}

/// Adds ϑ·SD(y) to the first maximum of `y` (SD with divisor n − 1).
pub fn perturb_max(y: &[f64], vartheta: f64) -> Vec<f64> {
    let mut out = y.to_vec();
    if y.len() < 2 || vartheta == 0.0 {
        return out;
    }
    let k = argmax(y);
    out[k] += vartheta * sample_sd(y);
    out
}

fn argmax(y: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in y.iter().enumerate() {
        if v > y[best] {
            best = i;
        }
    }
    best
}

fn sample_sd(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    (y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Position of the smallest weight (first on ties). Weights are indexed from
/// time p, so the series index is `p + position`.
pub fn detect_influential(u_hat: &[f64]) -> Option<usize> {
    if u_hat.is_empty() {
        return None;
    }
    let mut best = 0;
    for (i, &v) in u_hat.iter().enumerate() {
        if v < u_hat[best] {
            best = i;
        }
    }
    Some(best)
}

/// νσ²/(ν − 2), the innovation variance; `None` when ν ≤ 2.
pub fn innovation_variance(theta: &Theta) -> Option<f64> {
    if theta.nu > 2.0 {
        Some(if theta.nu.is_finite() {
            theta.nu * theta.sigma2 / (theta.nu - 2.0)
        } else {
            theta.sigma2
        })
    } else {
        None
    }
}

/// How each covariate column is generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Covariate {
    Intercept,
    Normal,
    Uniform,
}

pub fn generate_covariates<R: Rng + ?Sized>(
    columns: &[Covariate],
    n: usize,
    rng: &mut R,
) -> DMatrix<f64> {
    let mut x = DMatrix::zeros(n, columns.len());
    for i in 0..n {
        for (j, col) in columns.iter().enumerate() {
            x[(i, j)] = match col {
                Covariate::Intercept => 1.0,
                Covariate::Normal => rng.sample(StandardNormal),
                Covariate::Uniform => rng.random::<f64>(),
            };
        }
    }
    x
}

#[derive(Debug, Clone, PartialEq)]
pub struct McDesign {
    pub replicates: usize,
    pub n: usize,
    pub theta_true: Theta,
    pub covariates: Vec<Covariate>,
    /// Detection limit; `None` disables censoring.
    pub lod: Option<f64>,
    pub missing_frac: f64,
    /// ϑ for the maximum-perturbation protocol.
    pub perturbation: Option<f64>,
    pub burnin: usize,
    pub seed: u64,
}

impl McDesign {
    pub fn validate(&self) -> Result<()> {
        let spec = self.theta_true.spec();
        if self.replicates == 0 {
            return Err(Error::domain("need at least one replicate"));
        }
        if self.covariates.len() != spec.q {
            return Err(Error::domain("covariate design does not match beta"));
        }
        spec.check_length(self.n)?;
        if !self.theta_true.is_stationary() {
            return Err(Error::domain("true phi is not stationary"));
        }
        if !(0.0..=1.0).contains(&self.missing_frac) {
            return Err(Error::domain("missing fraction outside [0, 1]"));
        }
        if let Some(v) = self.perturbation {
            if !(v >= 0.0) {
                return Err(Error::domain("perturbation must be nonnegative"));
            }
        }
        Ok(())
    }
}

/// Everything recorded about one replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateOutcome {
    pub replicate: usize,
    /// Estimates in (β, φ, σ², ν) order, absent when the fit failed.
    pub estimates: Option<Vec<f64>>,
    pub std_errors: Vec<Option<f64>>,
    pub converged: bool,
    pub iterations: usize,
    pub censored_rate: f64,
    pub missing_rate: f64,
    /// Whether the perturbed observation had the smallest weight.
    pub detected: Option<bool>,
    pub sigma2_star: Option<f64>,
    pub error: Option<String>,
}

struct Dataset {
    data: CensoredSeries,
    perturbed: Option<usize>,
}

fn generate_dataset(design: &McDesign, rng: &mut RngStream) -> Result<Dataset> {
    let p = design.theta_true.p();
    for _ in 0..MAX_ATTEMPTS {
        let x = generate_covariates(&design.covariates, design.n, rng);
        let mut y = simulate_cart(&design.theta_true, &x, design.burnin, rng)?;
        let mut perturbed = None;
        if let Some(v) = design.perturbation {
            perturbed = Some(argmax(&y));
            y = perturb_max(&y, v);
        }
        let data = match design.lod {
            Some(lod) => match apply_censoring(&y, x, lod, design.missing_frac, p, rng) {
                Ok(d) => d,
                Err(Error::Precondition(_)) => continue,
                Err(e) => return Err(e),
            },
            None => CensoredSeries::observed(y, x)?,
        };
        return Ok(Dataset { data, perturbed });
    }
    Err(Error::Study(format!(
        "the first p values were censored in {MAX_ATTEMPTS} consecutive draws"
    )))
}

/// The censored dataset of replicate `r`, with the 0-based index of the
/// perturbed observation when a perturbation is set.
pub fn simulate_dataset(design: &McDesign, r: usize) -> Result<(CensoredSeries, Option<usize>)> {
    design.validate()?;
    let mut rng = RngStream::new(design.seed, r as u64);
    let ds = generate_dataset(design, &mut rng)?;
    Ok((ds.data, ds.perturbed))
}

/// Generates, censors and fits replicate `r` on its own stream.
pub fn run_replicate(design: &McDesign, config: &SaemConfig, r: usize) -> Result<ReplicateOutcome> {
    let mut rng = RngStream::new(design.seed, r as u64);
    let ds = generate_dataset(design, &mut rng)?;
    let n = ds.data.len() as f64;
    let n_missing = ds.data.n_missing();
    let mut outcome = ReplicateOutcome {
        replicate: r,
        estimates: None,
        std_errors: Vec::new(),
        converged: false,
        iterations: 0,
        censored_rate: (ds.data.n_censored() - n_missing) as f64 / n,
        missing_rate: n_missing as f64 / n,
        detected: None,
        sigma2_star: None,
        error: None,
    };
    let fit_config = SaemConfig {
        seed: rng.next_u64(),
        stream_id: r as u64,
        ..config.clone()
    };
    match fit(&ds.data, design.theta_true.spec(), fit_config) {
        Ok(f) => {
            let p = f.spec.p;
            outcome.detected = ds
                .perturbed
                .map(|k| detect_influential(&f.u_hat).map(|i| p + i) == Some(k));
            outcome.sigma2_star = innovation_variance(&f.theta);
            outcome.estimates = Some(f.theta.to_vec());
            outcome.std_errors = f.std_errors;
            outcome.converged = f.converged;
            outcome.iterations = f.iterations_run;
        }
        Err(e) => outcome.error = Some(e.to_string()),
    }
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamSummary {
    pub name: String,
    pub truth: f64,
    pub mc_mean: f64,
    /// Sample SD over replicates; `None` with a single replicate.
    pub mc_sd: Option<f64>,
    pub im_se: Option<f64>,
    /// Coverage of the 95% Wald interval, reported for β only.
    pub cp: Option<f64>,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McSummary {
    pub params: Vec<ParamSummary>,
    pub replicates: usize,
    pub failures: usize,
    pub censored_rate: f64,
    pub missing_rate: f64,
    pub di_percent: Option<f64>,
    pub sigma2_star_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McStudy {
    pub summary: McSummary,
    pub outcomes: Vec<ReplicateOutcome>,
}

/// Runs every replicate on a pool of `jobs` threads and summarizes them.
pub fn mc_study(design: &McDesign, config: &SaemConfig, jobs: usize) -> Result<McStudy> {
    design.validate()?;
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Study(e.to_string()))?;
    let outcomes: Vec<ReplicateOutcome> = pool.install(|| {
        (0..design.replicates)
            .into_par_iter()
            .map(|r| run_replicate(design, config, r))
            .collect::<Result<Vec<_>>>()
    })?;
    let summary = summarize(&design.theta_true, &outcomes)?;
    Ok(McStudy { summary, outcomes })
}

pub fn summarize(truth: &Theta, outcomes: &[ReplicateOutcome]) -> Result<McSummary> {
    let spec: ModelSpec = truth.spec();
    let names = spec.parameter_names();
    let truth_v = truth.to_vec();
    let ok: Vec<&ReplicateOutcome> = outcomes.iter().filter(|o| o.estimates.is_some()).collect();
    if ok.is_empty() {
        return Err(Error::Study(format!("all {} replicates failed", outcomes.len())));
    }
    let r = ok.len() as f64;
    let mut params = Vec::with_capacity(names.len());
    for (j, name) in names.iter().enumerate() {
        let est: Vec<f64> = ok.iter().map(|o| o.estimates.as_ref().unwrap()[j]).collect();
        let mean = est.iter().sum::<f64>() / r;
        let mc_sd = (ok.len() > 1).then(|| {
            (est.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (r - 1.0)).sqrt()
        });
        let mse = est.iter().map(|v| (v - truth_v[j]) * (v - truth_v[j])).sum::<f64>() / r;
        let ses: Vec<(f64, f64)> = ok
            .iter()
            .filter_map(|o| o.std_errors.get(j).copied().flatten().map(|s| (o.estimates.as_ref().unwrap()[j], s)))
            .collect();
        let im_se = (!ses.is_empty()).then(|| ses.iter().map(|s| s.1).sum::<f64>() / ses.len() as f64);
        let cp = if j < spec.q && !ses.is_empty() {
            let mut covered = 0usize;
            for &(e, s) in &ses {
                let (lo, hi) = confidence_interval(e, s, 0.95)?;
                if lo <= truth_v[j] && truth_v[j] <= hi {
                    covered += 1;
                }
            }
            Some(covered as f64 / ses.len() as f64)
        } else {
            None
        };
        params.push(ParamSummary {
            name: name.clone(),
            truth: truth_v[j],
            mc_mean: mean,
            mc_sd,
            im_se,
            cp,
            mse,
        });
    }
    let n_all = outcomes.len() as f64;
    let det: Vec<bool> = ok.iter().filter_map(|o| o.detected).collect();
    let s2: Vec<f64> = ok.iter().filter_map(|o| o.sigma2_star).collect();
    Ok(McSummary {
        params,
        replicates: outcomes.len(),
        failures: outcomes.len() - ok.len(),
        censored_rate: outcomes.iter().map(|o| o.censored_rate).sum::<f64>() / n_all,
        missing_rate: outcomes.iter().map(|o| o.missing_rate).sum::<f64>() / n_all,
        di_percent: (!det.is_empty())
            .then(|| 100.0 * det.iter().filter(|&&d| d).count() as f64 / det.len() as f64),
        sigma2_star_mean: (!s2.is_empty()).then(|| s2.iter().sum::<f64>() / s2.len() as f64),
    })
}

/// A named study configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub theta_true: Theta,
    pub covariates: Vec<Covariate>,
    pub n: usize,
    pub lod: Option<f64>,
    pub perturbations: Vec<f64>,
}

/// Parses `sim1` or `sim2`, optionally followed by `-n<N>` and `-lod<L>`
/// segments, e.g. `sim1-n300-lod1.60`.
///
/// `sim1`: β = (5, 0.5, 0.9), φ = (−0.40, 0.12), σ² = 2, ν = 4 with an
/// intercept, a standard normal and a uniform covariate; n = 300.
/// `sim2`: β = (4, 0.5), φ = (0.48, −0.20), σ² = 1 with Gaussian innovations,
/// an intercept and a standard normal covariate; n = 100; perturbations
/// ϑ ∈ {0, 1, 2, 3, 4, 5, 7}.
pub fn preset(name: &str) -> Result<Preset> {
    let mut parts = name.split('-');
    let base = parts.next().unwrap_or_default();
    let mut preset = match base {
        "sim1" => Preset {
            theta_true: Theta::new(vec![5.0, 0.5, 0.9], vec![-0.40, 0.12], 2.0, 4.0)?,
            covariates: vec![Covariate::Intercept, Covariate::Normal, Covariate::Uniform],
            n: 300,
            lod: None,
            perturbations: Vec::new(),
        },
        "sim2" => Preset {
            theta_true: Theta::new(vec![4.0, 0.5], vec![0.48, -0.20], 1.0, f64::INFINITY)?,
            covariates: vec![Covariate::Intercept, Covariate::Normal],
            n: 100,
            lod: None,
            perturbations: vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 7.0],
        },
        _ => return Err(Error::domain(format!("unknown preset '{name}'"))),
    };
    for part in parts {
        if let Some(v) = part.strip_prefix("lod") {
            preset.lod = Some(
                v.parse()
                    .map_err(|_| Error::domain(format!("bad detection limit in preset '{name}'")))?,
            );
        } else if let Some(v) = part.strip_prefix('n') {
            preset.n = v
                .parse()
                .map_err(|_| Error::domain(format!("bad sample size in preset '{name}'")))?;
        } else {
            return Err(Error::domain(format!("unknown preset segment '{part}'")));
        }
    }
    Ok(preset)
}

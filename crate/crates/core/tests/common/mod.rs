//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use cartp::model::Theta;
use cartp::sampler::LatentDraw;
use nalgebra::DMatrix;
use statrs::function::gamma::ln_gamma;

/// Location μ_t recomputed from the definition.
pub fn location(beta: &[f64], phi: &[f64], y: &[f64], x: &DMatrix<f64>, t: usize) -> f64 {
    let xb = |s: usize| (0..beta.len()).map(|j| x[(s, j)] * beta[j]).sum::<f64>();
    let mut mu = xb(t);
    for (j, ph) in phi.iter().enumerate() {
        mu += ph * (y[t - 1 - j] - xb(t - 1 - j));
    }
    mu
}

/// Exact log-likelihood of a fully observed series given its first p values:
/// the sum of conditional Student-t log-densities. `v` is (β, φ, σ², ν).
pub fn exact_loglik(v: &[f64], q: usize, p: usize, y: &[f64], x: &DMatrix<f64>) -> f64 {
    let beta = &v[..q];
    let phi = &v[q..q + p];
    let s2 = v[q + p];
    let nu = v[q + p + 1];
    if !(s2 > 0.0 && nu > 0.0) {
        return f64::NEG_INFINITY;
    }
    let c = ln_gamma((nu + 1.0) / 2.0) - ln_gamma(nu / 2.0) - 0.5 * (std::f64::consts::PI * nu * s2).ln();
    (p..y.len())
        .map(|t| {
            let r = y[t] - location(beta, phi, y, x, t);
            c - (nu + 1.0) / 2.0 * (1.0 + r * r / (nu * s2)).ln()
        })
        .sum()
}

/// Complete-data log-likelihood log f(y, u | y_1..p, θ) for a latent draw.
pub fn complete_loglik(v: &[f64], q: usize, p: usize, draw: &LatentDraw, x: &DMatrix<f64>) -> f64 {
    let beta = &v[..q];
    let phi = &v[q..q + p];
    let s2 = v[q + p];
    let nu = v[q + p + 1];
    let y = &draw.y_full;
    let mut total = 0.0;
    for t in p..y.len() {
        let u = draw.u[t - p];
        let r = y[t] - location(beta, phi, y, x, t);
        total += -0.5 * (2.0 * std::f64::consts::PI * s2 / u).ln() - u * r * r / (2.0 * s2);
        total += 0.5 * nu * (0.5 * nu).ln() - ln_gamma(0.5 * nu) + (0.5 * nu - 1.0) * u.ln() - 0.5 * nu * u;
    }
    total
}

pub fn theta_vec(theta: &Theta) -> Vec<f64> {
    theta.to_vec()
}

/// Nelder–Mead minimization with restarts until the best value stalls.
pub fn nelder_mead(f: &dyn Fn(&[f64]) -> f64, x0: &[f64], step: f64, max_iter: usize) -> Vec<f64> {
    let mut best = x0.to_vec();
    let mut best_val = f(&best);
    for _ in 0..6 {
        let x = nm_once(f, &best, step, max_iter);
        let val = f(&x);
        let gain = best_val - val;
        best = x;
        best_val = val;
        if gain.abs() < 1e-10 {
            break;
        }
    }
    best
}

fn nm_once(f: &dyn Fn(&[f64]) -> f64, x0: &[f64], step: f64, max_iter: usize) -> Vec<f64> {
    let d = x0.len();
    let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
    for i in 0..d {
        let mut v = x0.to_vec();
        v[i] += if v[i].abs() > 1e-8 { step * v[i].abs().max(0.1) } else { step };
        simplex.push(v);
    }
    let mut vals: Vec<f64> = simplex.iter().map(|v| f(v)).collect();
    for _ in 0..max_iter {
        let mut order: Vec<usize> = (0..=d).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        vals = order.iter().map(|&i| vals[i]).collect();
        if (vals[d] - vals[0]).abs() < 1e-12 * (1.0 + vals[0].abs()) {
            break;
        }
        let centroid: Vec<f64> = (0..d).map(|j| simplex[..d].iter().map(|v| v[j]).sum::<f64>() / d as f64).collect();
        let along = |t: f64| -> Vec<f64> { (0..d).map(|j| centroid[j] + t * (simplex[d][j] - centroid[j])).collect() };
        let xr = along(-1.0);
        let fr = f(&xr);
        if fr < vals[0] {
            let xe = along(-2.0);
            let fe = f(&xe);
            if fe < fr {
                simplex[d] = xe;
                vals[d] = fe;
            } else {
                simplex[d] = xr;
                vals[d] = fr;
            }
        } else if fr < vals[d - 1] {
            simplex[d] = xr;
            vals[d] = fr;
        } else {
            let xc = if fr < vals[d] { along(-0.5) } else { along(0.5) };
            let fc = f(&xc);
            if fc < vals[d].min(fr) {
                simplex[d] = xc;
                vals[d] = fc;
            } else {
                for i in 1..=d {
                    simplex[i] = (0..d).map(|j| simplex[0][j] + 0.5 * (simplex[i][j] - simplex[0][j])).collect();
                    vals[i] = f(&simplex[i]);
                }
            }
        }
    }
    let i = (0..=d).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
    simplex[i].clone()
}

/// Direct maximum likelihood on a fully observed series, optimizing over
/// (β, φ, log σ², log ν) from a crude least-squares start.
pub fn direct_ml(q: usize, p: usize, y: &[f64], x: &DMatrix<f64>) -> Vec<f64> {
    let n = y.len();
    let yv = nalgebra::DVector::from_column_slice(y);
    let beta0 = (x.transpose() * x).lu().solve(&(x.transpose() * &yv)).unwrap();
    let resid = &yv - x * &beta0;
    let var = resid.iter().map(|r| r * r).sum::<f64>() / n as f64;
    let mut start: Vec<f64> = beta0.iter().copied().collect();
    start.extend(std::iter::repeat_n(0.0, p));
    start.push(var.ln());
    start.push(10f64.ln());
    let to_theta = |z: &[f64]| -> Vec<f64> {
        let mut v = z.to_vec();
        v[q + p] = z[q + p].exp();
        v[q + p + 1] = z[q + p + 1].exp();
        v
    };
    let obj = |z: &[f64]| -> f64 {
        let ll = exact_loglik(&to_theta(z), q, p, y, x);
        if ll.is_finite() {
            -ll
        } else {
            f64::INFINITY
        }
    };
    let z = nelder_mead(&obj, &start, 0.2, 20_000);
    to_theta(&z)
}

/// Kolmogorov–Smirnov statistic of a sample against a continuous CDF.
pub fn ks_statistic(sample: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &v) in s.iter().enumerate() {
        let c = cdf(v);
        d = d.max((i as f64 + 1.0) / n - c).max(c - i as f64 / n);
    }
    d
}

/// Asymptotic Kolmogorov p-value for statistic `d` at sample size `n`.
pub fn ks_pvalue(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=200 {
        let k = k as f64;
        sum += 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
    }
    sum.clamp(0.0, 1.0)
}

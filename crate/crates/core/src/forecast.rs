//! Recursive forecasting, one-step-ahead evaluation and quantile residuals.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{location_at, t_cdf, Theta};
use crate::special::normal_quantile;

/// Bound applied to the fitted CDF before the normal quantile so that extreme
/// observations map to finite residuals.
pub const CDF_CLAMP: f64 = 1e-15;

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastRequest {
    /// Covariates for the future times, one row per step.
    pub x_pred: DMatrix<f64>,
}

impl ForecastRequest {
    pub fn horizon(&self) -> usize {
        self.x_pred.nrows()
    }
}

fn check_history(theta: &Theta, y: &[f64], x: &DMatrix<f64>) -> Result<()> {
    if x.nrows() != y.len() || x.ncols() != theta.q() {
        return Err(Error::domain("history and covariates do not match"));
    }
    if y.len() < theta.p() {
        return Err(Error::domain(format!("need at least p = {} past values", theta.p())));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("history must be fully observed or imputed"));
    }
    Ok(())
}

/// Multi-step forecasts ŷ_{n+1}, ..., ŷ_{n+h}; later steps feed on earlier
/// forecasts.
pub fn forecast(
    theta: &Theta,
    y_complete: &[f64],
    x: &DMatrix<f64>,
    req: &ForecastRequest,
) -> Result<Vec<f64>> {
    check_history(theta, y_complete, x)?;
    let h = req.horizon();
    if h == 0 {
        return Err(Error::domain("forecast horizon must be at least 1"));
    }
    if req.x_pred.ncols() != theta.q() {
        return Err(Error::domain("future covariates have the wrong number of columns"));
    }
    let n = y_complete.len();
    let p = theta.p();
    // only the last p values matter
    let start = n - p;
    let mut y: Vec<f64> = y_complete[start..].to_vec();
    let mut xb: Vec<f64> = (start..n).map(|t| x.row(t).dot(&theta.beta.transpose())).collect();
    for k in 0..h {
        xb.push(req.x_pred.row(k).dot(&theta.beta.transpose()));
        y.push(0.0);
        let t = p + k;
        y[t] = location_at(&theta.phi, &y, &xb, t);
    }
    Ok(y[p..].to_vec())
}

/// Predicts each test value from the true values before it.
pub fn one_step_ahead(
    theta: &Theta,
    y_history: &[f64],
    x_history: &DMatrix<f64>,
    x_test: &DMatrix<f64>,
    y_test: &[f64],
) -> Result<Vec<f64>> {
    check_history(theta, y_history, x_history)?;
    if x_test.nrows() != y_test.len() || x_test.ncols() != theta.q() {
        return Err(Error::domain("test covariates and values do not match"));
    }
    let n = y_history.len();
    let p = theta.p();
    let mut y: Vec<f64> = y_history[n - p..].to_vec();
    let mut xb: Vec<f64> =
        (n - p..n).map(|t| x_history.row(t).dot(&theta.beta.transpose())).collect();
    let mut out = Vec::with_capacity(y_test.len());
    for (k, &actual) in y_test.iter().enumerate() {
        xb.push(x_test.row(k).dot(&theta.beta.transpose()));
        y.push(actual);
        out.push(location_at(&theta.phi, &y, &xb, p + k));
    }
    Ok(out)
}

fn check_pair(pred: &[f64], actual: &[f64]) -> Result<()> {
    if pred.is_empty() || pred.len() != actual.len() {
        return Err(Error::domain("prediction and actual vectors must be non-empty and equal length"));
    }
    Ok(())
}

/// Mean squared prediction error.
pub fn mspe(pred: &[f64], actual: &[f64]) -> Result<f64> {
    check_pair(pred, actual)?;
    Ok(pred.iter().zip(actual).map(|(p, a)| (p - a) * (p - a)).sum::<f64>() / pred.len() as f64)
}

/// Mean absolute prediction error (not normalized by the actual values).
pub fn mape(pred: &[f64], actual: &[f64]) -> Result<f64> {
    check_pair(pred, actual)?;
    Ok(pred.iter().zip(actual).map(|(p, a)| (p - a).abs()).sum::<f64>() / pred.len() as f64)
}

/// r_i = Φ⁻¹(T(y_i; μ_i, σ², ν)) for times p..n.
pub fn quantile_residuals(theta: &Theta, y_complete: &[f64], x: &DMatrix<f64>) -> Result<Vec<f64>> {
    check_history(theta, y_complete, x)?;
    let xb: Vec<f64> = (x * &theta.beta).iter().copied().collect();
    Ok((theta.p()..y_complete.len())
        .map(|t| {
            let resid = y_complete[t] - location_at(&theta.phi, y_complete, &xb, t);
            let c = t_cdf(resid, theta.sigma2, theta.nu).clamp(CDF_CLAMP, 1.0 - CDF_CLAMP);
            normal_quantile(c)
        })
        .collect())
}

//! Dataset CSV files and JSON run reports.
//!
//! A dataset has the header `y,lower,upper,cens,x1,...,xq` and one row per
//! time point. An empty `lower` means −∞, an empty `upper` means +∞ and an
//! empty `y` marks an unknown value (allowed only on censored rows). Floats
//! are written in Rust's shortest round-trip form, so write → read is exact.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecast::quantile_residuals;
use crate::inference::confidence_interval;
use crate::model::{CensoredSeries, ModelSpec, Theta};
use crate::saem::{FitResult, SaemConfig};

const FIXED_COLUMNS: [&str; 4] = ["y", "lower", "upper", "cens"];

fn parse_field(raw: &str, row: usize, column: &str) -> Result<Option<f64>> {
    let s = raw.trim();
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<f64>().map(Some).map_err(|_| Error::Parse {
        row,
        message: format!("column '{column}': cannot parse '{s}' as a number"),
    })
}

pub fn parse_dataset<R: Read>(reader: R) -> Result<CensoredSeries> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header.len() < 5 || header[..4] != FIXED_COLUMNS {
        return Err(Error::Parse {
            row: 0,
            message: "header must start with y,lower,upper,cens followed by at least one covariate"
                .into(),
        });
    }
    let q = header.len() - 4;
    let (mut y, mut lower, mut upper, mut cens) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut xs: Vec<f64> = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Parse {
            row,
            message: e.to_string(),
        })?;
        if record.len() != header.len() {
            return Err(Error::Parse {
                row,
                message: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        let yv = parse_field(&record[0], row, "y")?;
        let lo = parse_field(&record[1], row, "lower")?;
        let hi = parse_field(&record[2], row, "upper")?;
        let c = match record[3].trim() {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Parse {
                    row,
                    message: format!("column 'cens' must be 0 or 1, found '{other}'"),
                })
            }
        };
        if c {
            let lo = lo.unwrap_or(f64::NEG_INFINITY);
            let hi = hi.unwrap_or(f64::INFINITY);
            if !(lo < hi) {
                return Err(Error::Parse {
                    row,
                    message: format!("censoring interval [{lo}, {hi}] is empty or a single point"),
                });
            }
            y.push(yv.unwrap_or(f64::NAN));
            lower.push(lo);
            upper.push(hi);
        } else {
            let v = yv.filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                row,
                message: "observed row needs a finite y".into(),
            })?;
            if lo.is_some_and(|l| l != v) || hi.is_some_and(|h| h != v) {
                return Err(Error::Parse {
                    row,
                    message: "observed row must have lower and upper empty or equal to y".into(),
                });
            }
            y.push(v);
            lower.push(v);
            upper.push(v);
        }
        cens.push(c);
        for j in 0..q {
            let v = parse_field(&record[4 + j], row, &header[4 + j])?
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    row,
                    message: format!("covariate '{}' must be a finite number", header[4 + j]),
                })?;
            xs.push(v);
        }
    }
    if y.is_empty() {
        return Err(Error::Parse {
            row: 0,
            message: "dataset has no rows".into(),
        });
    }
    let x = DMatrix::from_row_slice(y.len(), q, &xs);
    CensoredSeries::new(y, lower, upper, cens, x)
}

pub fn read_dataset(path: &Path) -> Result<CensoredSeries> {
    parse_dataset(std::fs::File::open(path)?)
}

fn fmt_value(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        String::new()
    }
}

pub fn write_dataset<W: Write>(writer: W, data: &CensoredSeries) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend((1..=data.n_covariates()).map(|j| format!("x{j}")));
    w.write_record(&header)?;
    for t in 0..data.len() {
        let mut rec = vec![
            fmt_value(data.y[t]),
            fmt_value(data.lower[t]),
            fmt_value(data.upper[t]),
            if data.cens[t] { "1" } else { "0" }.to_string(),
        ];
        rec.extend((0..data.n_covariates()).map(|j| fmt_value(data.x[(t, j)])));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Plain numeric CSV with a header row, e.g. future covariates.
pub fn parse_matrix<R: Read>(reader: R) -> Result<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let cols = rdr.headers()?.len();
    let mut vals = Vec::new();
    let mut rows = 0;
    for (i, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            row: i + 1,
            message: e.to_string(),
        })?;
        for (j, field) in record.iter().enumerate() {
            let v = parse_field(field, i + 1, &format!("column {}", j + 1))?.ok_or_else(|| {
                Error::Parse {
                    row: i + 1,
                    message: format!("column {} is empty", j + 1),
                }
            })?;
            vals.push(v);
        }
        rows += 1;
    }
    Ok(DMatrix::from_row_slice(rows, cols, &vals))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub name: String,
    pub estimate: f64,
    pub se: Option<f64>,
    /// 95% Wald interval.
    pub ci: Option<(f64, f64)>,
    /// Set for ν when its estimate lies within 5% of a bound.
    pub fragile: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Imputation {
    /// 1-based row in the dataset.
    pub row: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub dataset: String,
    pub p: usize,
    pub q: usize,
    pub n: usize,
    pub config: SaemConfig,
    pub parameters: Vec<ParamReport>,
    pub information_matrix: Vec<Vec<f64>>,
    pub imputed: Vec<Imputation>,
    pub iterations: usize,
    pub converged: bool,
    /// Parameter vector after each iteration.
    pub trace: Vec<Vec<f64>>,
    /// Quantile residuals for rows p+1..n of the completed series.
    pub residuals: Vec<f64>,
    pub u_hat: Vec<f64>,
    /// The series with censored values replaced by their imputations.
    pub y_complete: Vec<f64>,
    /// Covariates of the last p rows, needed to start forecasts.
    pub x_tail: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_seconds: Option<f64>,
}

impl RunReport {
    pub fn new(
        dataset: &str,
        data: &CensoredSeries,
        config: &SaemConfig,
        fit: &FitResult,
    ) -> Result<Self> {
        let names = fit.spec.parameter_names();
        let est = fit.theta.to_vec();
        let d = names.len();
        let mut parameters = Vec::with_capacity(d);
        for j in 0..d {
            let se = fit.std_errors[j];
            let ci = se.map(|s| confidence_interval(est[j], s, 0.95)).transpose()?;
            parameters.push(ParamReport {
                name: names[j].clone(),
                estimate: est[j],
                se,
                ci,
                fragile: j == d - 1 && fit.nu_fragile,
            });
        }
        let p = fit.spec.p;
        let n = data.len();
        Ok(RunReport {
            dataset: dataset.to_string(),
            p,
            q: fit.spec.q,
            n,
            config: config.clone(),
            parameters,
            information_matrix: (0..d)
                .map(|i| (0..d).map(|j| fit.info_matrix[(i, j)]).collect())
                .collect(),
            imputed: fit
                .imputed
                .iter()
                .map(|&(t, v)| Imputation { row: t + 1, value: v })
                .collect(),
            iterations: fit.iterations_run,
            converged: fit.converged,
            trace: fit.theta_trace.clone(),
            residuals: quantile_residuals(&fit.theta, &fit.y_complete, &data.x)?,
            u_hat: fit.u_hat.clone(),
            y_complete: fit.y_complete.clone(),
            x_tail: (n - p..n)
                .map(|t| (0..fit.spec.q).map(|j| data.x[(t, j)]).collect())
                .collect(),
            wall_clock_seconds: None,
        })
    }

    pub fn spec(&self) -> Result<ModelSpec> {
        ModelSpec::new(self.p, self.q)
    }

    pub fn theta(&self) -> Result<Theta> {
        let v: Vec<f64> = self.parameters.iter().map(|p| p.estimate).collect();
        Theta::from_slice(self.spec()?, &v)
    }

    /// The last p completed values and their covariates.
    pub fn history(&self) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let p = self.p;
        if self.y_complete.len() < p || self.x_tail.len() != p {
            return Err(Error::domain("report does not carry p rows of history"));
        }
        let y = self.y_complete[self.y_complete.len() - p..].to_vec();
        let x = DMatrix::from_fn(p, self.q, |i, j| self.x_tail[i][j]);
        Ok((y, x))
    }

    pub fn to_writer<W: Write>(&self, writer: W) -> Result<()> {
        serde_json::to_writer_pretty(writer, self)?;
        Ok(())
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        Ok(serde_json::from_reader(reader)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "y,lower,upper,cens,x1,x2\n\
        1.5,,,0,1,0.3\n\
        ,,0.25,1,1,-0.1\n\
        0.7,0.7,0.7,0,1,2.5\n\
        ,,,1,1,0\n";

    #[test]
    fn parses_bounds_and_missing() {
        let d = parse_dataset(SAMPLE.as_bytes()).unwrap();
        assert_eq!(d.len(), 4);
        assert_eq!(d.lower[1], f64::NEG_INFINITY);
        assert_eq!(d.upper[1], 0.25);
        assert!(d.is_missing(3));
        assert_eq!(d.x[(2, 1)], 2.5);
        assert_eq!(d.lower[0], 1.5);
    }

    #[test]
    fn reports_offending_row() {
        let bad = "y,lower,upper,cens,x1\n1,,,0,1\n2,,,0,abc\n";
        match parse_dataset(bad.as_bytes()) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 2),
            other => panic!("unexpected {other:?}"),
        }
        let bad = "y,lower,upper,cens,x1\n1,,,0,1\n2,0,1,0,1\n";
        assert!(matches!(parse_dataset(bad.as_bytes()), Err(Error::Parse { row: 2, .. })));
        let bad = "y,lower,upper,cens,x1\n1,,,2,1\n";
        assert!(matches!(parse_dataset(bad.as_bytes()), Err(Error::Parse { row: 1, .. })));
        assert!(parse_dataset("a,b\n1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let d = parse_dataset(SAMPLE.as_bytes()).unwrap();
        let mut d2 = d.clone();
        d2.x[(0, 1)] = 0.1 + 0.2;
        d2.y[2] = std::f64::consts::PI;
        d2.lower[2] = d2.y[2];
        d2.upper[2] = d2.y[2];
        let mut buf = Vec::new();
        write_dataset(&mut buf, &d2).unwrap();
        let back = parse_dataset(buf.as_slice()).unwrap();
        assert_eq!(back.x, d2.x);
        assert_eq!(back.y[2].to_bits(), d2.y[2].to_bits());
        assert!(back.y[1].is_nan());
        assert_eq!(back.cens, d2.cens);
    }
}

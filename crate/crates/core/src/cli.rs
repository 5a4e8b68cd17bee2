//! The `cartp` command-line interface.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::forecast::{forecast, quantile_residuals, ForecastRequest};
use crate::io::{parse_matrix, read_dataset, write_dataset, RunReport};
use crate::model::ModelSpec;
use crate::saem::{fit, SaemConfig};
use crate::sampler::GibbsBackend;
use crate::simulation::{mc_study, preset, simulate_dataset, McDesign, McStudy, DEFAULT_BURNIN};

pub const EXIT_OK: u8 = 0;
pub const EXIT_ERROR: u8 = 1;
pub const EXIT_NOT_CONVERGED: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "cartp", version, about = "Censored autoregressive regression with Student-t innovations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model to a dataset CSV and write a JSON report.
    Fit(FitArgs),
    /// Forecast from a fitted report and future covariates.
    Predict(PredictArgs),
    /// Quantile residuals of a fitted report on its dataset.
    Residuals(ResidualsArgs),
    /// Generate one dataset from a simulation design.
    Simulate(SimulateArgs),
    /// Run a Monte Carlo study and write summary CSVs.
    McStudy(McStudyArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BackendArg {
    Banded,
    Dense,
}

#[derive(Debug, Args)]
pub struct SaemArgs {
    /// Monte Carlo draws per iteration.
    #[arg(long, default_value_t = 20)]
    pub m: usize,
    /// Maximum number of SAEM iterations.
    #[arg(long, default_value_t = 400)]
    pub iters: usize,
    /// Fraction of iterations run without memory.
    #[arg(long, default_value_t = 0.25)]
    pub cutoff: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Gibbs sweeps over the censored block per draw.
    #[arg(long, default_value_t = 5)]
    pub sweeps: usize,
    /// Consecutive small steps required to declare convergence.
    #[arg(long, default_value_t = 3)]
    pub patience: usize,
    #[arg(long, env = "CARTP_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = BackendArg::Banded)]
    pub backend: BackendArg,
}

impl SaemArgs {
    fn config(&self) -> SaemConfig {
        SaemConfig {
            m: self.m,
            max_iter: self.iters,
            cutoff: self.cutoff,
            inner_sweeps: self.sweeps,
            tol: self.tol,
            patience: self.patience,
            seed: self.seed,
            backend: match self.backend {
                BackendArg::Banded => GibbsBackend::Banded,
                BackendArg::Dense => GibbsBackend::Dense,
            },
            ..SaemConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    pub data: PathBuf,
    /// Autoregressive order.
    #[arg(long)]
    pub p: usize,
    #[command(flatten)]
    pub saem: SaemArgs,
    /// Report path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Record wall-clock time in the report (makes output non-reproducible).
    #[arg(long)]
    pub timing: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub report: PathBuf,
    /// CSV of future covariates with a header row, one row per step.
    #[arg(long)]
    pub covariates: PathBuf,
    /// Number of steps; defaults to the number of covariate rows.
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ResidualsArgs {
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DesignArgs {
    /// sim1 or sim2, optionally with -n<N> and -lod<L>, e.g. sim1-n300-lod1.60.
    #[arg(long, default_value = "sim1")]
    pub preset: String,
    #[arg(long)]
    pub n: Option<usize>,
    /// Detection limit; values at or below it are left-censored.
    #[arg(long)]
    pub lod: Option<f64>,
    /// Share of censored values turned into missing values.
    #[arg(long, default_value_t = 0.2)]
    pub missing: f64,
    #[arg(long, default_value_t = DEFAULT_BURNIN)]
    pub burnin: usize,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub design: DesignArgs,
    /// Perturbation ϑ applied to the maximum.
    #[arg(long)]
    pub perturb: Option<f64>,
    /// Replicate number; selects the random stream.
    #[arg(long, default_value_t = 0)]
    pub replicate: usize,
    #[arg(long, env = "CARTP_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct McStudyArgs {
    #[command(flatten)]
    pub design: DesignArgs,
    #[arg(long, default_value_t = 100)]
    pub replicates: usize,
    /// Comma-separated perturbations; defaults to the preset's list.
    #[arg(long, value_delimiter = ',')]
    pub perturb: Option<Vec<f64>>,
    /// Worker threads for replicates; defaults to all cores.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[command(flatten)]
    pub saem: SaemArgs,
    /// Summary CSV path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-replicate CSV path.
    #[arg(long)]
    pub per_replicate: Option<PathBuf>,
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(std::io::stdout())),
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

fn read_report(path: &Path) -> Result<RunReport> {
    RunReport::from_reader(std::io::BufReader::new(File::open(path)?))
}

fn cmd_fit(args: &FitArgs) -> Result<u8> {
    let started = Instant::now();
    let data = read_dataset(&args.data)?;
    let spec = ModelSpec::new(args.p, data.n_covariates())?;
    let config = args.saem.config();
    let result = fit(&data, spec, config.clone())?;
    let mut report = RunReport::new(&args.data.to_string_lossy(), &data, &config, &result)?;
    if args.timing {
        report.wall_clock_seconds = Some(started.elapsed().as_secs_f64());
    }
    let mut out = output(args.out.as_deref())?;
    report.to_writer(&mut out)?;
    writeln!(out)?;
    out.flush()?;
    if !result.converged {
        eprintln!("warning: no convergence after {} iterations", result.iterations_run);
        return Ok(EXIT_NOT_CONVERGED);
    }
    Ok(EXIT_OK)
}

fn cmd_predict(args: &PredictArgs) -> Result<u8> {
    let report = read_report(&args.report)?;
    let theta = report.theta()?;
    let (y_hist, x_hist) = report.history()?;
    let x_future = parse_matrix(File::open(&args.covariates)?)?;
    let h = args.horizon.unwrap_or(x_future.nrows());
    if h > x_future.nrows() {
        return Err(Error::Domain(format!(
            "horizon {h} exceeds the {} covariate rows",
            x_future.nrows()
        )));
    }
    let req = ForecastRequest {
        x_pred: x_future.rows(0, h).into_owned(),
    };
    let yhat = forecast(&theta, &y_hist, &x_hist, &req)?;
    let mut w = csv::Writer::from_writer(output(args.out.as_deref())?);
    w.write_record(["step", "yhat"])?;
    for (k, v) in yhat.iter().enumerate() {
        w.write_record([(k + 1).to_string(), format!("{v}")])?;
    }
    w.flush()?;
    Ok(EXIT_OK)
}

fn cmd_residuals(args: &ResidualsArgs) -> Result<u8> {
    let report = read_report(&args.report)?;
    let data = read_dataset(&args.data)?;
    if data.len() != report.y_complete.len() || data.n_covariates() != report.q {
        return Err(Error::Domain(format!(
            "dataset is {}×{} but the report was fitted to {}×{}",
            data.len(),
            data.n_covariates(),
            report.y_complete.len(),
            report.q
        )));
    }
    let theta = report.theta()?;
    let r = quantile_residuals(&theta, &report.y_complete, &data.x)?;
    let mut w = csv::Writer::from_writer(output(args.out.as_deref())?);
    w.write_record(["index", "residual"])?;
    for (i, v) in r.iter().enumerate() {
        w.write_record([(report.p + i + 1).to_string(), format!("{v}")])?;
    }
    w.flush()?;
    Ok(EXIT_OK)
}

fn design(args: &DesignArgs, replicates: usize, perturbation: Option<f64>, seed: u64) -> Result<McDesign> {
    let pre = preset(&args.preset)?;
    let d = McDesign {
        replicates,
        n: args.n.unwrap_or(pre.n),
        theta_true: pre.theta_true,
        covariates: pre.covariates,
        lod: args.lod.or(pre.lod),
        missing_frac: args.missing,
        perturbation,
        burnin: args.burnin,
        seed,
    };
    d.validate()?;
    Ok(d)
}

fn cmd_simulate(args: &SimulateArgs) -> Result<u8> {
    let d = design(&args.design, args.replicate + 1, args.perturb, args.seed)?;
    let (data, _) = simulate_dataset(&d, args.replicate)?;
    let mut out = output(args.out.as_deref())?;
    write_dataset(&mut out, &data)?;
    out.flush()?;
    Ok(EXIT_OK)
}

fn write_summary<W: Write>(w: &mut csv::Writer<W>, perturb: Option<f64>, study: &McStudy) -> Result<()> {
    let s = &study.summary;
    for p in &s.params {
        w.write_record([
            cell(perturb),
            p.name.clone(),
            format!("{}", p.truth),
            format!("{}", p.mc_mean),
            cell(p.mc_sd),
            cell(p.im_se),
            cell(p.cp),
            format!("{}", p.mse),
            cell(s.di_percent),
            cell(s.sigma2_star_mean),
            format!("{}", s.censored_rate),
            format!("{}", s.missing_rate),
            s.replicates.to_string(),
            s.failures.to_string(),
        ])?;
    }
    Ok(())
}

fn write_replicates<W: Write>(
    w: &mut csv::Writer<W>,
    perturb: Option<f64>,
    study: &McStudy,
    d: usize,
) -> Result<()> {
    for o in &study.outcomes {
        let mut rec = vec![
            cell(perturb),
            o.replicate.to_string(),
            o.converged.to_string(),
            o.iterations.to_string(),
            format!("{}", o.censored_rate),
            format!("{}", o.missing_rate),
            o.detected.map(|b| b.to_string()).unwrap_or_default(),
            cell(o.sigma2_star),
        ];
        for j in 0..d {
            rec.push(cell(o.estimates.as_ref().map(|e| e[j])));
            rec.push(cell(o.std_errors.get(j).copied().flatten()));
        }
        rec.push(o.error.clone().unwrap_or_default());
        w.write_record(&rec)?;
    }
    Ok(())
}

fn cmd_mc_study(args: &McStudyArgs) -> Result<u8> {
    let config = args.saem.config();
    config.validate()?;
    let perturbs: Vec<Option<f64>> = match &args.perturb {
        Some(v) => v.iter().map(|&x| Some(x)).collect(),
        None => {
            let pre = preset(&args.design.preset)?.perturbations;
            if pre.is_empty() {
                vec![None]
            } else {
                pre.into_iter().map(Some).collect()
            }
        }
    };
    let designs = perturbs
        .iter()
        .map(|&v| design(&args.design, args.replicates, v, args.saem.seed))
        .collect::<Result<Vec<_>>>()?;
    let jobs = args
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if jobs == 0 {
        return Err(Error::Domain("--jobs must be at least 1".into()));
    }
    let names = designs[0].theta_true.spec().parameter_names();

    let mut summary = csv::Writer::from_writer(output(args.out.as_deref())?);
    summary.write_record([
        "perturb", "parameter", "truth", "mc_mean", "mc_sd", "im_se", "cp", "mse", "di_percent",
        "sigma2_star_mean", "censored_rate", "missing_rate", "replicates", "failures",
    ])?;
    let mut per_rep = match &args.per_replicate {
        Some(p) => {
            let mut w = csv::Writer::from_writer(output(Some(p))?);
            let mut header: Vec<String> = [
                "perturb", "replicate", "converged", "iterations", "censored_rate", "missing_rate",
                "detected", "sigma2_star",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect();
            for n in &names {
                header.push(format!("est_{n}"));
                header.push(format!("se_{n}"));
            }
            header.push("error".into());
            w.write_record(&header)?;
            Some(w)
        }
        None => None,
    };
    for (d, &v) in designs.iter().zip(&perturbs) {
        let study = mc_study(d, &config, jobs)?;
        write_summary(&mut summary, v, &study)?;
        if let Some(w) = per_rep.as_mut() {
            write_replicates(w, v, &study, names.len())?;
        }
    }
    summary.flush()?;
    if let Some(mut w) = per_rep {
        w.flush()?;
    }
    Ok(EXIT_OK)
}

pub fn execute(cli: &Cli) -> Result<u8> {
    match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Residuals(a) => cmd_residuals(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::McStudy(a) => cmd_mc_study(a),
    }
}

/// Parses arguments, runs the command and maps errors to exit code 1.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

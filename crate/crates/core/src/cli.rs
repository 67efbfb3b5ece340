//! `volbias` command-line front end.
//!
//! Every command writes its outputs plus a `manifest.json` into the output
//! directory (`--out`, else `$VOLBIAS_OUT_DIR`, else `./out`). Files are
//! written to a temporary name and renamed into place. `volbias replay`
//! re-runs a manifest.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 usage or domain error,
//! 3 numerical failure.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmt::sig9;
use crate::optim::{grid_oracle, optimal_ce, optimal_sd, OptimOptions, SdEstimator};
use crate::region::{canonical_abc, volume_error};
use crate::sweep::{
    bias_curve, landscape, threshold_scan, uniform_grid, write_bias_csv, write_landscape_csv,
    SweepEstimator, DEFAULT_MU, DEFAULT_N_SUB, LANDSCAPE_P_TRUE,
};
use crate::toytrain::{
    cross_validate, generate, train, EpochRecord, FeatureMode, LossKind, Optimizer, ToyDatasetSpec,
    ToyModel, TrainConfig, TrainReport,
};

pub const OUT_DIR_ENV: &str = "VOLBIAS_OUT_DIR";
pub const MANIFEST_FILE: &str = "manifest.json";

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "volbias", version, about = "Volumetric bias of soft Dice versus cross-entropy")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "command")]
pub enum Command {
    /// Soft Dice risk as a function of the shared uncertain prediction.
    Landscape(LandscapeArgs),
    /// Optimal predictions, volume errors and switch thresholds.
    Sweep(SweepArgs),
    /// Risk-optimal prediction for one canonical model.
    Optimize(OptimizeArgs),
    /// Train the toy logistic model against CE or soft Dice.
    TrainToy(TrainToyArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorChoice {
    Exact,
    Plugin,
    Both,
}

impl EstimatorChoice {
    fn estimators(self) -> Vec<SweepEstimator> {
        match self {
            EstimatorChoice::Exact => vec![SweepEstimator::Exact],
            EstimatorChoice::Plugin => vec![SweepEstimator::PlugIn],
            EstimatorChoice::Both => vec![SweepEstimator::Exact, SweepEstimator::PlugIn],
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct OutArgs {
    /// Output directory.
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct LandscapeArgs {
    /// Volume ratio of uncertain to certain foreground (repeatable).
    #[arg(long = "mu", value_parser = positive_f64)]
    pub mu: Vec<f64>,
    /// Number of independent uncertain sub-regions (repeatable).
    #[arg(long = "n-sub", value_parser = clap::value_parser!(u32).range(1..))]
    pub n_sub: Vec<u32>,
    #[arg(long, value_enum, default_value_t = EstimatorChoice::Both)]
    pub estimator: EstimatorChoice,
    #[arg(long, default_value_t = 101, value_parser = clap::value_parser!(u32).range(2..))]
    pub p_hat_points: u32,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SweepArgs {
    #[arg(long = "mu", value_parser = positive_f64)]
    pub mu: Vec<f64>,
    #[arg(long = "n-sub", value_parser = clap::value_parser!(u32).range(1..))]
    pub n_sub: Vec<u32>,
    #[arg(long, default_value_t = 201, value_parser = clap::value_parser!(u32).range(2..))]
    pub p_points: u32,
    #[arg(long, value_enum, default_value_t = EstimatorChoice::Both)]
    pub estimator: EstimatorChoice,
    /// Bisection tolerance of the threshold search.
    #[arg(long, default_value_t = 1e-6, value_parser = positive_f64)]
    pub tol: f64,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizeEstimator {
    /// Cross-entropy (closed form).
    Ce,
    /// Binomial-grouped exact expectation.
    Exact,
    /// Full enumeration with one coordinate per sub-region.
    Enum,
    Plugin,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct OptimizeArgs {
    #[arg(long, value_parser = positive_f64)]
    pub mu: f64,
    #[arg(long = "n-sub", default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    pub n_sub: u32,
    #[arg(long = "p-beta", value_parser = unit_f64)]
    pub p_beta: f64,
    #[arg(long, value_enum, default_value_t = OptimizeEstimator::Exact)]
    pub estimator: OptimizeEstimator,
    /// Also run the grid oracle at this resolution.
    #[arg(long, value_parser = clap::value_parser!(u32).range(2..))]
    pub oracle: Option<u32>,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossChoice {
    Ce,
    Sd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureChoice {
    Onehot,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerChoice {
    Gd,
    Adam,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainToyArgs {
    #[arg(long, value_enum)]
    pub loss: LossChoice,
    /// Comma-separated region probabilities. Three values use the canonical
    /// background / uncertain / foreground geometry.
    #[arg(long, value_delimiter = ',', default_value = "0,0.75,1", value_parser = unit_f64)]
    pub region_probs: Vec<f64>,
    /// Uncertain-to-certain volume ratio of the canonical geometry.
    #[arg(long, default_value_t = 1.0, value_parser = positive_f64)]
    pub mu: f64,
    /// Pixels per unit volume of the canonical geometry.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    pub pixel_scale: u32,
    /// Explicit comma-separated pixel counts per region.
    #[arg(long, value_delimiter = ',')]
    pub region_pixels: Option<Vec<usize>>,
    /// Pixels per region when the geometry is neither canonical nor explicit.
    #[arg(long, default_value_t = 10)]
    pub pixels_per_region: usize,
    #[arg(long, default_value_t = 2000, value_parser = clap::value_parser!(u32).range(1..))]
    pub images: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = FeatureChoice::Onehot)]
    pub features: FeatureChoice,
    /// Class separation of the gaussian features.
    #[arg(long, default_value_t = 2.0)]
    pub separation: f64,
    #[arg(long, value_enum, default_value_t = OptimizerChoice::Gd)]
    pub optimizer: OptimizerChoice,
    /// Initial learning rate (default depends on loss and optimizer).
    #[arg(long, value_parser = positive_f64)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Cross-validation folds; 1 means a single 80/20 split.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    pub folds: u32,
    #[arg(long, default_value_t = 10_000)]
    pub bootstrap: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutArgs,
}

fn positive_f64(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(format!("expected a positive number, got {s}"))
    }
}

fn unit_f64(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.trim().parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("expected a value in [0, 1], got {s}"))
    }
}

/// Record written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub parameters: serde_json::Value,
    pub seed: u64,
    pub tool_version: String,
    pub output_paths: Vec<String>,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Landscape(_) => "landscape",
            Command::Sweep(_) => "sweep",
            Command::Optimize(_) => "optimize",
            Command::TrainToy(_) => "train-toy",
            Command::Replay(_) => "replay",
        }
    }

    fn out(&self) -> &OutArgs {
        match self {
            Command::Landscape(a) => &a.out,
            Command::Sweep(a) => &a.out,
            Command::Optimize(a) => &a.out,
            Command::TrainToy(a) => &a.out,
            Command::Replay(a) => &a.out,
        }
    }

    fn set_out(&mut self, dir: Option<PathBuf>) {
        let slot = match self {
            Command::Landscape(a) => &mut a.out,
            Command::Sweep(a) => &mut a.out,
            Command::Optimize(a) => &mut a.out,
            Command::TrainToy(a) => &mut a.out,
            Command::Replay(a) => &mut a.out,
        };
        slot.out = dir;
    }

    fn seed(&self) -> u64 {
        match self {
            Command::TrainToy(a) => a.seed,
            _ => 0,
        }
    }
}

/// Maps an error to the process exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Domain(_) | Error::Contract(_) => EXIT_USAGE,
        Error::Numerical(_) => EXIT_NUMERICAL,
        Error::Io(_) => EXIT_IO,
    }
}

fn resolve_out(out: &OutArgs) -> PathBuf {
    out.out
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

/// Writes `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Outputs {
    dir: PathBuf,
    written: Vec<String>,
}

impl Outputs {
    fn new(dir: PathBuf) -> Result<Self> {
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            written: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.dir.join(name), bytes)?;
        self.written.push(name.to_string());
        Ok(())
    }
}

fn jsonl<T: Serialize>(items: &[T]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item).map_err(|e| Error::Io(e.to_string()))?;
        buf.push(b'\n');
    }
    Ok(buf)
}

/// Runs a parsed command and returns the output directory.
pub fn run(cli: Cli) -> Result<PathBuf> {
    run_command(cli.command)
}

pub fn run_command(command: Command) -> Result<PathBuf> {
    if let Command::Replay(args) = command {
        let text = fs::read_to_string(&args.manifest)?;
        let manifest: RunManifest =
            serde_json::from_str(&text).map_err(|e| Error::domain(format!("bad manifest: {e}")))?;
        let mut cmd: Command = serde_json::from_value(manifest.parameters)
            .map_err(|e| Error::domain(format!("bad manifest parameters: {e}")))?;
        if matches!(cmd, Command::Replay(_)) {
            return Err(Error::domain("a manifest cannot replay another replay"));
        }
        cmd.set_out(args.out.out.clone());
        return run_command(cmd);
    }

    let mut out = Outputs::new(resolve_out(command.out()))?;
    match &command {
        Command::Landscape(a) => cmd_landscape(a, &mut out)?,
        Command::Sweep(a) => cmd_sweep(a, &mut out)?,
        Command::Optimize(a) => cmd_optimize(a, &mut out)?,
        Command::TrainToy(a) => cmd_train_toy(a, &mut out)?,
        Command::Replay(_) => unreachable!("handled above"),
    }

    let manifest = RunManifest {
        command: command.name().to_string(),
        parameters: serde_json::to_value(&command).map_err(|e| Error::Io(e.to_string()))?,
        seed: command.seed(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        output_paths: out.written.clone(),
    };
    let mut text = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Io(e.to_string()))?;
    text.push(b'\n');
    write_atomic(&out.dir.join(MANIFEST_FILE), &text)?;
    Ok(out.dir)
}

fn or_default<T: Copy>(given: &[T], default: &[T]) -> Vec<T> {
    if given.is_empty() {
        default.to_vec()
    } else {
        given.to_vec()
    }
}

fn n_subs(given: &[u32]) -> Vec<usize> {
    if given.is_empty() {
        DEFAULT_N_SUB.to_vec()
    } else {
        given.iter().map(|&n| n as usize).collect()
    }
}

fn cmd_landscape(a: &LandscapeArgs, out: &mut Outputs) -> Result<()> {
    let mus = or_default(&a.mu, &DEFAULT_MU);
    let grid = uniform_grid(a.p_hat_points as usize);
    let mut jobs = Vec::new();
    for est in a.estimator.estimators() {
        for &n in &n_subs(&a.n_sub) {
            for &mu in &mus {
                jobs.push((est, n, mu));
            }
        }
    }
    let files = jobs
        .par_iter()
        .map(|&(est, n, mu)| {
            let points = landscape(mu, n, &LANDSCAPE_P_TRUE, &grid, est)?;
            let mut buf = Vec::new();
            write_landscape_csv(est, n, mu, &points, &mut buf)?;
            Ok((format!("landscape_{}_n{}_mu{}.csv", est.tag(), n, sig9(mu)), buf))
        })
        .collect::<Result<Vec<_>>>()?;
    for (name, buf) in files {
        out.write(&name, &buf)?;
    }
    Ok(())
}

fn cmd_sweep(a: &SweepArgs, out: &mut Outputs) -> Result<()> {
    let mus = or_default(&a.mu, &DEFAULT_MU);
    let grid = uniform_grid(a.p_points as usize);
    let opts = OptimOptions::default();
    let mut jobs = Vec::new();
    for &n in &n_subs(&a.n_sub) {
        for &mu in &mus {
            jobs.push((SweepEstimator::Ce, n, mu));
            for est in a.estimator.estimators() {
                jobs.push((est, n, mu));
            }
        }
    }
    let results = jobs
        .par_iter()
        .map(|&(est, n, mu)| {
            let rows = bias_curve(mu, n, &grid, est, &opts)?;
            let threshold = match est {
                SweepEstimator::Ce => None,
                _ => Some(threshold_scan(mu, n, est, a.tol, &opts)?),
            };
            Ok((rows, threshold))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    let mut thresholds = Vec::new();
    for (r, t) in results {
        rows.extend(r);
        thresholds.extend(t);
    }
    thresholds.sort_by(|x, y| {
        x.estimator
            .tag()
            .cmp(y.estimator.tag())
            .then(x.n_sub.cmp(&y.n_sub))
            .then(x.mu.total_cmp(&y.mu))
    });
    let mut buf = Vec::new();
    write_bias_csv(rows, &mut buf)?;
    out.write("bias_curve.csv", &buf)?;
    out.write("thresholds.jsonl", &jsonl(&thresholds)?)?;
    Ok(())
}

#[derive(Serialize)]
struct OptimizeRecord {
    mu: f64,
    n_sub: usize,
    p_beta: f64,
    estimator: OptimizeEstimator,
    method: crate::optim::OptimMethod,
    pred: Vec<f64>,
    risk: f64,
    delta_v: f64,
    iterations: usize,
    converged: bool,
}

fn cmd_optimize(a: &OptimizeArgs, out: &mut Outputs) -> Result<()> {
    let n = a.n_sub as usize;
    let model = canonical_abc(a.mu, a.p_beta, n)?;
    let sd = match a.estimator {
        OptimizeEstimator::Ce => None,
        OptimizeEstimator::Exact => Some(SdEstimator::ExactBinomial),
        OptimizeEstimator::Enum => Some(SdEstimator::ExactEnum),
        OptimizeEstimator::Plugin => Some(SdEstimator::PlugIn),
    };
    let mut results = vec![match sd {
        None => optimal_ce(&model),
        Some(est) => optimal_sd(&model, est, &OptimOptions::default())?,
    }];
    if let (Some(res), Some(est)) = (a.oracle, sd) {
        results.push(grid_oracle(&model, est, res as usize)?);
    }
    let records = results
        .into_iter()
        .map(|r| {
            Ok(OptimizeRecord {
                mu: a.mu,
                n_sub: n,
                p_beta: a.p_beta,
                estimator: a.estimator,
                method: r.method,
                delta_v: volume_error(&model, &r.pred)?,
                pred: r.pred.into_inner(),
                risk: r.risk.value,
                iterations: r.iterations,
                converged: r.converged,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    out.write("optimum.jsonl", &jsonl(&records)?)
}

#[derive(Serialize)]
struct ReportRecord<'a> {
    loss: LossChoice,
    fold: Option<usize>,
    #[serde(flatten)]
    report: &'a TrainReport,
}

fn write_trace(traces: &[(Option<usize>, &[EpochRecord])]) -> Vec<u8> {
    let mut s = String::from("fold,epoch,train_loss,val_loss,learning_rate\n");
    for (fold, trace) in traces {
        let fold = fold.map(|f| f.to_string()).unwrap_or_default();
        for r in trace.iter() {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                fold,
                r.epoch,
                sig9(r.train_loss),
                sig9(r.val_loss),
                sig9(r.learning_rate)
            ));
        }
    }
    s.into_bytes()
}

fn cmd_train_toy(a: &TrainToyArgs, out: &mut Outputs) -> Result<()> {
    let n_images = a.images as usize;
    let mut spec = if let Some(pixels) = &a.region_pixels {
        ToyDatasetSpec {
            n_images,
            region_pixels: pixels.clone(),
            region_probs: a.region_probs.clone(),
            feature_mode: FeatureMode::RegionOneHot,
            seed: a.seed,
        }
    } else if a.region_probs.len() == 3 {
        let mut s = ToyDatasetSpec::canonical(a.mu, a.region_probs[1], n_images, a.pixel_scale as usize, a.seed)?;
        s.region_probs = a.region_probs.clone();
        s
    } else {
        ToyDatasetSpec::uniform(n_images, a.pixels_per_region, a.region_probs.clone(), a.seed)
    };
    if a.features == FeatureChoice::Gaussian {
        spec.feature_mode = FeatureMode::GaussianOverlap {
            separation: a.separation,
        };
    }
    let data = generate(&spec)?;

    let loss = match a.loss {
        LossChoice::Ce => LossKind::Ce,
        LossChoice::Sd => LossKind::Sd,
    };
    let mut config = TrainConfig::new(loss, a.seed);
    if a.optimizer == OptimizerChoice::Adam {
        config.optimizer = Optimizer::adam();
        config.learning_rate = 0.1;
    }
    if let Some(lr) = a.lr {
        config.learning_rate = lr;
    }
    if let Some(e) = a.epochs {
        config.max_epochs = e;
    }
    let init = ToyModel::zeros(data.n_features);

    if a.folds == 1 {
        let mut outcome = train(&data, &init, &config)?;
        if a.bootstrap != crate::toytrain::EvalOptions::new(0).bootstrap_resamples {
            let eval = crate::toytrain::EvalOptions {
                bootstrap_resamples: a.bootstrap,
                seed: a.seed ^ 0x5eed_b007,
            };
            let epochs = outcome.report.epochs_run;
            outcome.report =
                crate::toytrain::evaluate_images(&outcome.model, &data, &outcome.val_images, &eval)?;
            outcome.report.epochs_run = epochs;
        }
        let record = ReportRecord {
            loss: a.loss,
            fold: None,
            report: &outcome.report,
        };
        out.write("report.jsonl", &jsonl(&[record])?)?;
        out.write("trace.csv", &write_trace(&[(None, &outcome.trace)]))?;
        out.write("model.json", &jsonl(&[&outcome.model])?)?;
    } else {
        let cv = cross_validate(&data, &init, &config, a.folds as usize)?;
        let mut records: Vec<ReportRecord> = cv
            .folds
            .iter()
            .enumerate()
            .map(|(f, r)| ReportRecord {
                loss: a.loss,
                fold: Some(f),
                report: r,
            })
            .collect();
        records.push(ReportRecord {
            loss: a.loss,
            fold: None,
            report: &cv.pooled,
        });
        out.write("report.jsonl", &jsonl(&records)?)?;
        let traces: Vec<(Option<usize>, &[EpochRecord])> = cv
            .traces
            .iter()
            .enumerate()
            .map(|(f, t)| (Some(f), t.as_slice()))
            .collect();
        out.write("trace.csv", &write_trace(&traces))?;
    }
    Ok(())
}

/// Parameters a manifest records, keyed by name; handy for tools that
/// only want the flag values.
pub fn manifest_parameters(manifest: &RunManifest) -> BTreeMap<String, serde_json::Value> {
    match &manifest.parameters {
        serde_json::Value::Object(map) => map.clone().into_iter().collect(),
        _ => BTreeMap::new(),
    }
}

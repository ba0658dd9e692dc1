//! Batch command-line front end.
//!
//! Every subcommand resolves its flags and optional config file into a
//! serializable [`Job`], runs it inside a rayon pool sized by `--jobs`, and
//! writes a `manifest.json` next to its outputs. `rerun <manifest>` replays
//! the recorded job, so outputs can be regenerated byte for byte.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{self, fmt_f64, NormalizedSeries};
use crate::fbm::{check_hurst, FbmSampler, FbmSpec};
use crate::hurst::{burn_in_for, estimate_hurst, HurstEstimate};
use crate::metrics::{self, EvalConfig, MetricReport, PathGenerator, ReplayGenerator};
use crate::solver::{generate_fou, FouParams};
use crate::trainer::{train, Checkpoint, GeneratorConfig, TrainingReport};
use crate::{Error, Result, SamplePath};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

pub const MANIFEST: &str = "manifest.json";
const DEFAULT_OUT: &str = "fsdenet-out";
const GENERATE_STREAM: u64 = 2;

/// Exit code for a pipeline error.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        EXIT_NUMERICAL
    } else if matches!(e, Error::Config(_)) {
        EXIT_USAGE
    } else {
        EXIT_DATA
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "fsdenet",
    version,
    about = "Neural fractional SDE generator for long-memory time series"
)]
struct Cli {
    /// Master seed (default 0, or `seed` from the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// TOML or JSON config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate fBm or fractional OU paths.
    Simulate(SimulateArgs),
    /// R/S Hurst estimate of a CSV series.
    EstimateHurst(HurstArgs),
    /// Fit a generator to a CSV series.
    Train(TrainArgs),
    /// Sample level paths from a checkpoint.
    Generate(GenerateArgs),
    /// Score a generator against a historical series.
    Evaluate(EvaluateArgs),
    /// Train and evaluate a suite of datasets and generators.
    Benchmark(BenchmarkArgs),
    /// Replay the job recorded in a manifest.
    Rerun(RerunArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProcessKind {
    Fbm,
    Fou,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    kind: ProcessKind,
    #[arg(long)]
    hurst: Option<f64>,
    /// Number of steps.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    horizon: Option<f64>,
    /// fOU mean reversion.
    #[arg(long, allow_hyphen_values = true)]
    alpha: Option<f64>,
    /// fOU noise scale.
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    x0: Option<f64>,
    /// Number of paths; path k uses seed + k.
    #[arg(long)]
    paths: Option<usize>,
}

#[derive(Args, Debug)]
struct HurstArgs {
    #[arg(long)]
    input: PathBuf,
    /// Horizons skipped before the regression (default min(100, (len - 11) / 2)).
    #[arg(long)]
    burn_in: Option<usize>,
    /// Estimate on the raw values instead of the normalized log-differences.
    #[arg(long)]
    levels: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    input: PathBuf,
    /// Hurst index of the driving noise (default: R/S estimate of the data).
    #[arg(long)]
    hurst: Option<f64>,
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    substeps: Option<usize>,
    #[arg(long)]
    fixed_noise: bool,
    #[arg(long)]
    early_stop: bool,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// CSV whose first column supplies the timestamps.
    #[arg(long, conflicts_with_all = ["n", "horizon"])]
    timestamps: Option<PathBuf>,
    /// Uniform grid with this many steps.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long)]
    paths: Option<usize>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, required_unless_present = "replay")]
    checkpoint: Option<PathBuf>,
    /// Score the historical returns against themselves.
    #[arg(long, conflicts_with = "checkpoint")]
    replay: bool,
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    max_lag: Option<usize>,
    #[arg(long)]
    test_fraction: Option<f64>,
}

#[derive(Args, Debug)]
struct BenchmarkArgs {
    /// Evaluation seeds per cell.
    #[arg(long)]
    seeds: Option<usize>,
    /// Adds a user-supplied dataset, as NAME=PATH.
    #[arg(long = "csv", value_name = "NAME=PATH")]
    csv: Vec<String>,
    /// Keeps only the user-supplied datasets.
    #[arg(long)]
    csv_only: bool,
}

#[derive(Args, Debug)]
struct RerunArgs {
    manifest: PathBuf,
}

/// Contents of `--config`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ConfigFile {
    seed: Option<u64>,
    simulate: SimulateSection,
    estimate_hurst: HurstSection,
    train: GeneratorConfig,
    generate: GenerateSection,
    evaluate: EvalConfig,
    benchmark: Option<Suite>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SimulateSection {
    hurst: Option<f64>,
    n: Option<usize>,
    horizon: Option<f64>,
    alpha: Option<f64>,
    beta: Option<f64>,
    x0: Option<f64>,
    paths: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct HurstSection {
    burn_in: Option<usize>,
    levels: bool,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct GenerateSection {
    n: Option<usize>,
    horizon: Option<f64>,
    paths: Option<usize>,
}

fn read_config(path: &Path) -> Result<ConfigFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |e: String| Error::Config(format!("{}: {e}", path.display()));
    if path.extension().is_some_and(|x| x == "json") {
        serde_json::from_str(&text).map_err(|e| bad(e.to_string()))
    } else {
        toml::from_str(&text).map_err(|e| bad(e.to_string()))
    }
}

/// A fully resolved subcommand, as recorded in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case")]
pub enum Job {
    Simulate(SimulateJob),
    EstimateHurst(HurstJob),
    Train(TrainJob),
    Generate(GenerateJob),
    Evaluate(EvaluateJob),
    Benchmark(Suite),
}

impl Job {
    pub fn name(&self) -> &'static str {
        match self {
            Job::Simulate(_) => "simulate",
            Job::EstimateHurst(_) => "estimate-hurst",
            Job::Train(_) => "train",
            Job::Generate(_) => "generate",
            Job::Evaluate(_) => "evaluate",
            Job::Benchmark(_) => "benchmark",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateJob {
    pub kind: ProcessKind,
    pub hurst: f64,
    pub n: usize,
    pub horizon: f64,
    pub alpha: f64,
    pub beta: f64,
    pub x0: f64,
    pub paths: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HurstJob {
    pub input: PathBuf,
    pub burn_in: Option<usize>,
    pub levels: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainJob {
    pub input: PathBuf,
    pub config: GeneratorConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TimestampSource {
    File { path: PathBuf },
    Uniform { n: usize, horizon: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateJob {
    pub checkpoint: PathBuf,
    pub timestamps: TimestampSource,
    pub paths: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateJob {
    pub input: PathBuf,
    /// `None` replays the historical returns.
    pub checkpoint: Option<PathBuf>,
    pub config: EvalConfig,
}

/// A benchmark dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Dataset {
    /// Synthetic fOU path with the benchmark coefficients.
    Fou {
        hurst: f64,
        #[serde(default = "default_n")]
        n: usize,
        #[serde(default = "default_horizon")]
        horizon: f64,
        /// Defaults to the master seed.
        #[serde(default)]
        seed: Option<u64>,
    },
    Csv {
        name: String,
        path: PathBuf,
    },
}

fn default_n() -> usize {
    1000
}
fn default_horizon() -> f64 {
    1.0
}

impl Dataset {
    pub fn label(&self) -> String {
        match self {
            Dataset::Fou { hurst, .. } => format!("fOU({hurst})"),
            Dataset::Csv { name, .. } => name.clone(),
        }
    }

    fn load(&self, master: u64) -> Result<SamplePath> {
        match self {
            Dataset::Fou {
                hurst,
                n,
                horizon,
                seed,
            } => generate_fou(
                FouParams::benchmark(*hurst),
                *n,
                *horizon,
                seed.unwrap_or(master),
            ),
            Dataset::Csv { path, .. } => dataio::load_csv(path),
        }
    }

    fn true_hurst(&self) -> Option<f64> {
        match self {
            Dataset::Fou { hurst, .. } => Some(*hurst),
            Dataset::Csv { .. } => None,
        }
    }
}

/// Hurst index a benchmark generator trains with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HurstChoice {
    Fixed(f64),
    Source(HurstSource),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HurstSource {
    /// The dataset's true index when synthetic, its R/S estimate otherwise.
    Data,
    /// Always the R/S estimate.
    Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub label: String,
    pub hurst: HurstChoice,
}

/// Datasets x generators x evaluation seeds.
///
/// Each (dataset, generator) cell trains once with the master seed and is
/// then evaluated under seeds `master .. master + seeds`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Suite {
    pub datasets: Vec<Dataset>,
    pub generators: Vec<GeneratorSpec>,
    pub seeds: usize,
    pub train: GeneratorConfig,
    pub evaluate: EvalConfig,
}

impl Default for Suite {
    fn default() -> Self {
        Self {
            datasets: [0.7, 0.8, 0.9]
                .map(|hurst| Dataset::Fou {
                    hurst,
                    n: default_n(),
                    horizon: default_horizon(),
                    seed: None,
                })
                .to_vec(),
            generators: vec![
                GeneratorSpec {
                    label: "fSDE".into(),
                    hurst: HurstChoice::Source(HurstSource::Data),
                },
                GeneratorSpec {
                    label: "SDE".into(),
                    hurst: HurstChoice::Fixed(0.5),
                },
            ],
            seeds: 10,
            train: GeneratorConfig::default(),
            evaluate: EvalConfig::default(),
        }
    }
}

/// Record written to every output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub version: String,
    pub seed: u64,
    pub jobs: Option<usize>,
    pub job: Job,
    pub inputs: Vec<PathBuf>,
    /// Files written, relative to the output directory.
    pub outputs: Vec<String>,
    pub warnings: Vec<String>,
    pub wall_time_seconds: f64,
}

impl RunManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Collects the files a job writes under its output directory.
struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
    inputs: Vec<PathBuf>,
    warnings: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
            inputs: Vec::new(),
            warnings: Vec::new(),
        })
    }

    /// Registers `name` and returns its full path, creating parent directories.
    fn path(&mut self, name: &str) -> Result<PathBuf> {
        let p = self.dir.join(name);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        self.files.push(name.to_string());
        Ok(p)
    }

    fn text(&mut self, name: &str, body: &str) -> Result<()> {
        let p = self.path(name)?;
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let body = serde_json::to_string_pretty(value).expect("serializable") + "\n";
        self.text(name, &body)
    }
}

fn absolute(path: &Path) -> Result<PathBuf> {
    std::fs::canonicalize(path).map_err(|e| Error::io(path, e))
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn check_hurst_flag(h: f64) -> Result<f64> {
    check_hurst(h).map_err(|e| usage(e.to_string()))?;
    Ok(h)
}

fn resolve(command: Command, file: ConfigFile) -> Result<Job> {
    Ok(match command {
        Command::Simulate(a) => {
            let s = file.simulate;
            let kind = a.kind;
            let hurst = a
                .hurst
                .or(s.hurst)
                .ok_or_else(|| usage("simulate needs --hurst"))?;
            let fou = FouParams::benchmark(hurst);
            let job = SimulateJob {
                kind,
                hurst: check_hurst_flag(hurst)?,
                n: a.n.or(s.n).unwrap_or(1000),
                horizon: a.horizon.or(s.horizon).unwrap_or(1.0),
                alpha: a.alpha.or(s.alpha).unwrap_or(fou.alpha),
                beta: a.beta.or(s.beta).unwrap_or(fou.beta),
                x0: a.x0.or(s.x0).unwrap_or(fou.x0),
                paths: a.paths.or(s.paths).unwrap_or(1),
            };
            if job.n == 0 || job.paths == 0 {
                return Err(usage("--n and --paths must be positive"));
            }
            if !(job.horizon > 0.0 && job.horizon.is_finite()) {
                return Err(usage("--horizon must be positive"));
            }
            if !(job.alpha.is_finite() && job.beta.is_finite() && job.x0.is_finite()) {
                return Err(usage("fOU parameters must be finite"));
            }
            Job::Simulate(job)
        }
        Command::EstimateHurst(a) => Job::EstimateHurst(HurstJob {
            input: absolute(&a.input)?,
            burn_in: a.burn_in.or(file.estimate_hurst.burn_in),
            levels: a.levels || file.estimate_hurst.levels,
        }),
        Command::Train(a) => {
            let mut config = file.train;
            if let Some(h) = a.hurst {
                config.hurst = Some(check_hurst_flag(h)?);
            }
            config.paths = a.paths.unwrap_or(config.paths);
            config.steps = a.steps.unwrap_or(config.steps);
            config.learning_rate = a.learning_rate.unwrap_or(config.learning_rate);
            config.substeps = a.substeps.unwrap_or(config.substeps);
            config.fixed_noise |= a.fixed_noise;
            config.early_stop |= a.early_stop;
            config.validate()?;
            Job::Train(TrainJob {
                input: absolute(&a.input)?,
                config,
            })
        }
        Command::Generate(a) => {
            let g = file.generate;
            let timestamps = match a.timestamps {
                Some(p) => TimestampSource::File {
                    path: absolute(&p)?,
                },
                None => {
                    let n =
                        a.n.or(g.n)
                            .ok_or_else(|| usage("generate needs --timestamps or --n"))?;
                    let horizon = a.horizon.or(g.horizon).unwrap_or(1.0);
                    if n == 0 || !(horizon > 0.0 && horizon.is_finite()) {
                        return Err(usage("--n and --horizon must be positive"));
                    }
                    TimestampSource::Uniform { n, horizon }
                }
            };
            let paths = a.paths.or(g.paths).unwrap_or(1);
            if paths == 0 {
                return Err(usage("--paths must be positive"));
            }
            Job::Generate(GenerateJob {
                checkpoint: absolute(&a.checkpoint)?,
                timestamps,
                paths,
            })
        }
        Command::Evaluate(a) => {
            let mut config = file.evaluate;
            config.paths = a.paths.unwrap_or(config.paths);
            config.bins = a.bins.unwrap_or(config.bins);
            config.max_lag = a.max_lag.or(config.max_lag);
            config.test_fraction = a.test_fraction.unwrap_or(config.test_fraction);
            Job::Evaluate(EvaluateJob {
                input: absolute(&a.input)?,
                checkpoint: a.checkpoint.as_deref().map(absolute).transpose()?,
                config,
            })
        }
        Command::Benchmark(a) => {
            let mut suite = file.benchmark.unwrap_or_default();
            if a.csv_only {
                suite.datasets.retain(|d| matches!(d, Dataset::Csv { .. }));
            }
            for spec in &a.csv {
                let (name, path) = spec
                    .split_once('=')
                    .ok_or_else(|| usage(format!("--csv expects NAME=PATH, got {spec}")))?;
                suite.datasets.push(Dataset::Csv {
                    name: name.to_string(),
                    path: PathBuf::from(path),
                });
            }
            for d in &mut suite.datasets {
                if let Dataset::Csv { path, .. } = d {
                    // Missing files become per-cell failures, not a usage error.
                    if let Ok(p) = std::fs::canonicalize(&*path) {
                        *path = p;
                    }
                }
            }
            suite.seeds = a.seeds.unwrap_or(suite.seeds);
            if suite.seeds == 0 || suite.datasets.is_empty() || suite.generators.is_empty() {
                return Err(usage(
                    "benchmark needs datasets, generators and at least one seed",
                ));
            }
            suite.train.validate()?;
            Job::Benchmark(suite)
        }
        Command::Rerun(_) => unreachable!("rerun is dispatched before resolution"),
    })
}

fn execute(job: &Job, seed: u64, out: &mut Outputs) -> Result<()> {
    match job {
        Job::Simulate(j) => simulate(j, seed, out),
        Job::EstimateHurst(j) => estimate(j, out),
        Job::Train(j) => train_cmd(j, seed, out),
        Job::Generate(j) => generate(j, seed, out),
        Job::Evaluate(j) => evaluate_cmd(j, seed, out),
        Job::Benchmark(s) => benchmark(s, seed, out),
    }
}

fn simulate(j: &SimulateJob, seed: u64, out: &mut Outputs) -> Result<()> {
    let dt = j.horizon / j.n as f64;
    let sampler = match j.kind {
        ProcessKind::Fbm => {
            let s = FbmSampler::new(FbmSpec::uniform(j.hurst, j.n, dt)?)?;
            if let Some(w) = s.warning() {
                out.warnings.push(w.to_string());
            }
            Some(s)
        }
        ProcessKind::Fou => None,
    };
    let params = FouParams {
        alpha: j.alpha,
        beta: j.beta,
        hurst: j.hurst,
        x0: j.x0,
    };
    let width = (j.paths - 1).to_string().len();
    for k in 0..j.paths {
        let s = seed.wrapping_add(k as u64);
        let path = match &sampler {
            Some(sampler) => {
                let p = sampler.sample(s).to_path();
                let (t, v) = p.into_parts();
                SamplePath::new(t, v.iter().map(|x| x + j.x0).collect())?
            }
            None => generate_fou(params, j.n, j.horizon, s)?,
        };
        let name = format!(
            "{}_{k:0width$}.csv",
            match j.kind {
                ProcessKind::Fbm => "fbm",
                ProcessKind::Fou => "fou",
            }
        );
        let p = out.path(&name)?;
        dataio::write_path_csv(p, &path)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct HurstOutput<'a> {
    input: &'a Path,
    series: &'static str,
    burn_in: usize,
    estimate: HurstEstimate,
}

fn estimate(j: &HurstJob, out: &mut Outputs) -> Result<()> {
    out.inputs.push(j.input.clone());
    let path = dataio::load_csv(&j.input)?;
    let series = if j.levels {
        let v = path.values();
        if v.iter().all(|&x| x == v[0]) {
            return Err(Error::Degenerate("series is constant".into()));
        }
        v.to_vec()
    } else {
        dataio::normalize(&path)?.returns
    };
    let burn_in = j.burn_in.unwrap_or_else(|| burn_in_for(series.len()));
    let est = estimate_hurst(&series, burn_in)?;
    println!(
        "hurst {:.6}  intercept {:.6}  stderr {:.6}  points {}",
        est.hurst, est.intercept, est.stderr, est.points_used
    );
    out.json(
        "hurst.json",
        &HurstOutput {
            input: &j.input,
            series: if j.levels { "levels" } else { "returns" },
            burn_in,
            estimate: est,
        },
    )
}

fn losses_csv(losses: &[f64]) -> String {
    let mut s = String::from("iteration,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{},{}", i + 1, fmt_f64(*l));
    }
    s
}

fn write_training(
    dir: &str,
    report: &TrainingReport,
    series: &NormalizedSeries,
    out: &mut Outputs,
) -> Result<()> {
    let ckpt = Checkpoint::new(report, series);
    let p = out.path(&format!("{dir}checkpoint.json"))?;
    ckpt.save(p)?;
    out.json(&format!("{dir}report.json"), report)?;
    out.text(&format!("{dir}losses.csv"), &losses_csv(&report.losses))
}

fn train_cmd(j: &TrainJob, seed: u64, out: &mut Outputs) -> Result<()> {
    out.inputs.push(j.input.clone());
    let series = dataio::normalize(&dataio::load_csv(&j.input)?)?;
    let config = GeneratorConfig {
        seed,
        ..j.config.clone()
    };
    let report = train(&config, &series)?;
    eprintln!(
        "trained {} iterations, H = {}, final loss {:.6}",
        report.losses.len(),
        report.model.hurst,
        report.losses.last().copied().unwrap_or(f64::NAN)
    );
    write_training("", &report, &series, out)
}

fn generate(j: &GenerateJob, seed: u64, out: &mut Outputs) -> Result<()> {
    out.inputs.push(j.checkpoint.clone());
    let ckpt = Checkpoint::load(&j.checkpoint)?;
    let timestamps = match &j.timestamps {
        TimestampSource::File { path } => {
            out.inputs.push(path.clone());
            dataio::load_csv(path)?.into_parts().0
        }
        TimestampSource::Uniform { n, horizon } => {
            (0..=*n).map(|i| *horizon * i as f64 / *n as f64).collect()
        }
    };
    let states = ckpt
        .model
        .sample_states(&timestamps, 0.0, j.paths, seed, GENERATE_STREAM)?;
    let paths = states
        .iter()
        .map(|z| dataio::levels_to_values(z, &ckpt.normalization, ckpt.initial_value))
        .collect::<Result<Vec<_>>>()?;
    let p = out.path("paths.csv")?;
    dataio::write_paths_csv(p, &timestamps, &paths)
}

fn histogram_csv(h: &metrics::Histogram) -> String {
    let mut s = String::from("left,right,historical,generated\n");
    for (i, w) in h.edges.windows(2).enumerate() {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            fmt_f64(w[0]),
            fmt_f64(w[1]),
            fmt_f64(h.historical[i]),
            fmt_f64(h.generated[i])
        );
    }
    s
}

fn correlogram_csv(c: &metrics::Correlogram) -> String {
    let mut s = String::from("lag,historical,generated\n");
    for (i, lag) in c.lags.iter().enumerate() {
        let _ = writeln!(
            s,
            "{lag},{},{}",
            fmt_f64(c.historical[i]),
            fmt_f64(c.generated[i])
        );
    }
    s
}

fn evaluate_cmd(j: &EvaluateJob, seed: u64, out: &mut Outputs) -> Result<()> {
    out.inputs.push(j.input.clone());
    let series = dataio::normalize(&dataio::load_csv(&j.input)?)?;
    let config = EvalConfig {
        seed,
        ..j.config.clone()
    };
    let eval = match &j.checkpoint {
        Some(p) => {
            out.inputs.push(p.clone());
            let ckpt = Checkpoint::load(p)?;
            metrics::evaluate(&series, &ckpt.model, &config)?
        }
        None => metrics::evaluate(&series, &ReplayGenerator::new(&series), &config)?,
    };
    let r = &eval.report;
    eprintln!(
        "hurst {:.3} +- {:.3} (original {:.3}), marginal {:.4}, acf {:.4}, wacf {:.4}, r2 {:.4}",
        r.hurst.mean, r.hurst.std, r.original_hurst, r.marginal, r.acf, r.wacf, r.r2
    );
    out.json("metrics.json", r)?;
    out.text(
        "metrics.csv",
        &format!("{}\n{}\n", MetricReport::CSV_HEADER, r.csv_row()),
    )?;
    out.text("histogram.csv", &histogram_csv(&eval.histogram))?;
    out.text("correlogram.csv", &correlogram_csv(&eval.correlogram))
}

/// Per-seed scores of one benchmark cell.
struct CellResult {
    dataset: String,
    generator: String,
    reports: Vec<MetricReport>,
    error: Option<String>,
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Trains one cell and evaluates it under every seed.
fn run_cell(
    suite: &Suite,
    series: &NormalizedSeries,
    dataset: &Dataset,
    spec: &GeneratorSpec,
    master: u64,
) -> Result<(TrainingReport, Vec<MetricReport>)> {
    let hurst = match spec.hurst {
        HurstChoice::Fixed(h) => Some(h),
        HurstChoice::Source(HurstSource::Data) => dataset.true_hurst(),
        HurstChoice::Source(HurstSource::Estimate) => None,
    };
    let config = GeneratorConfig {
        hurst,
        seed: master,
        ..suite.train.clone()
    };
    let report = train(&config, series)?;
    let reports = (0..suite.seeds)
        .map(|s| {
            let ec = EvalConfig {
                seed: master.wrapping_add(s as u64),
                ..suite.evaluate.clone()
            };
            Ok(metrics::evaluate(series, &report.model as &dyn PathGenerator, &ec)?.report)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((report, reports))
}

fn benchmark(suite: &Suite, seed: u64, out: &mut Outputs) -> Result<()> {
    let data: Vec<(String, std::result::Result<NormalizedSeries, String>)> = suite
        .datasets
        .iter()
        .map(|d| {
            if let Dataset::Csv { path, .. } = d {
                out.inputs.push(path.clone());
            }
            let s = d.load(seed).and_then(|p| dataio::normalize(&p));
            (d.label(), s.map_err(|e| e.to_string()))
        })
        .collect();

    let cells: Vec<(usize, usize)> = (0..suite.datasets.len())
        .flat_map(|d| (0..suite.generators.len()).map(move |g| (d, g)))
        .collect();
    let results: Vec<(CellResult, Option<(TrainingReport, usize)>)> = cells
        .par_iter()
        .map(|&(d, g)| {
            let spec = &suite.generators[g];
            let mut cell = CellResult {
                dataset: data[d].0.clone(),
                generator: spec.label.clone(),
                reports: Vec::new(),
                error: None,
            };
            let trained = match &data[d].1 {
                Err(e) => {
                    cell.error = Some(e.clone());
                    None
                }
                Ok(series) => match run_cell(suite, series, &suite.datasets[d], spec, seed) {
                    Ok((report, reports)) => {
                        cell.reports = reports;
                        Some((report, d))
                    }
                    Err(e) => {
                        cell.error = Some(e.to_string());
                        None
                    }
                },
            };
            (cell, trained)
        })
        .collect();

    let mut table = String::from(
        "dataset,model,hurst_mean,hurst_std,marginal_mean,marginal_std,acf_mean,acf_std,wacf_mean,wacf_std,r2_mean,r2_std,seeds,error\n",
    );
    let mut per_seed = format!("dataset,model,seed,{}\n", MetricReport::CSV_HEADER);
    let mut markdown = String::from(
        "| Dataset | Model | Hurst | Marginal | ACF | WACF | R2 |\n|---|---|---|---|---|---|---|\n",
    );
    let mut last_dataset = None;
    for (cell, trained) in &results {
        let dir = format!(
            "cells/{}__{}/",
            sanitize(&cell.dataset),
            sanitize(&cell.generator)
        );
        if let Some((report, d)) = trained {
            if let Ok(series) = &data[*d].1 {
                write_training(&dir, report, series, out)?;
            }
        }
        if last_dataset != Some(&cell.dataset) {
            last_dataset = Some(&cell.dataset);
            let original = cell.reports.first().map(|r| r.original_hurst).or_else(|| {
                data.iter()
                    .find(|(l, _)| *l == cell.dataset)
                    .and_then(|(_, s)| s.as_ref().ok())
                    .and_then(|s| estimate_hurst(&s.returns, burn_in_for(s.returns.len())).ok())
                    .map(|e| e.hurst)
            });
            if let Some(h) = original {
                let _ = writeln!(table, "{},Original,{},,,,,,,,,,,", cell.dataset, fmt_f64(h));
                let _ = writeln!(
                    markdown,
                    "| {} | Original | {h:.3} | - | - | - | - |",
                    cell.dataset
                );
            }
        }
        if let Some(e) = &cell.error {
            out.warnings
                .push(format!("{} / {}: {e}", cell.dataset, cell.generator));
            let _ = writeln!(
                table,
                "{},{},,,,,,,,,,,0,\"{}\"",
                cell.dataset,
                cell.generator,
                e.replace('"', "'")
            );
            let _ = writeln!(
                markdown,
                "| {} | {} | failed | | | | |",
                cell.dataset, cell.generator
            );
            continue;
        }
        let col = |f: fn(&MetricReport) -> f64| cell.reports.iter().map(f).collect::<Vec<_>>();
        let hurst = mean_std(&col(|r| r.hurst.mean));
        // Spread of the per-path estimates, averaged over seeds.
        let hurst_spread = mean_std(&col(|r| r.hurst.std)).0;
        let marginal = mean_std(&col(|r| r.marginal));
        let acf = mean_std(&col(|r| r.acf));
        let wacf = mean_std(&col(|r| r.wacf));
        let r2 = mean_std(&col(|r| r.r2));
        let _ = writeln!(
            table,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},",
            cell.dataset,
            cell.generator,
            fmt_f64(hurst.0),
            fmt_f64(hurst_spread),
            fmt_f64(marginal.0),
            fmt_f64(marginal.1),
            fmt_f64(acf.0),
            fmt_f64(acf.1),
            fmt_f64(wacf.0),
            fmt_f64(wacf.1),
            fmt_f64(r2.0),
            fmt_f64(r2.1),
            cell.reports.len()
        );
        let _ = writeln!(
            markdown,
            "| {} | {} | {:.3} ± {:.3} | {:.3} ± {:.3} | {:.3} ± {:.3} | {:.3} ± {:.3} | {:.3} ± {:.3} |",
            cell.dataset,
            cell.generator,
            hurst.0,
            hurst_spread,
            marginal.0,
            marginal.1,
            acf.0,
            acf.1,
            wacf.0,
            wacf.1,
            r2.0,
            r2.1
        );
        for (s, r) in cell.reports.iter().enumerate() {
            let _ = writeln!(
                per_seed,
                "{},{},{},{}",
                cell.dataset,
                cell.generator,
                seed.wrapping_add(s as u64),
                r.csv_row()
            );
        }
    }
    out.text("table.csv", &table)?;
    out.text("table.md", &markdown)?;
    out.text("seeds.csv", &per_seed)?;
    eprint!("{markdown}");
    Ok(())
}

fn run_job(job: &Job, seed: u64, jobs: Option<usize>, out_dir: &Path) -> Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| usage(format!("thread pool: {e}")))?;
    let start = Instant::now();
    let mut out = Outputs::new(out_dir)?;
    pool.install(|| execute(job, seed, &mut out))?;
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    let manifest = RunManifest {
        subcommand: job.name().to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        jobs,
        job: job.clone(),
        inputs: out.inputs,
        outputs: out.files,
        warnings: out.warnings,
        wall_time_seconds: start.elapsed().as_secs_f64(),
    };
    let body = serde_json::to_string_pretty(&manifest).expect("serializable") + "\n";
    let p = out_dir.join(MANIFEST);
    std::fs::write(&p, body).map_err(|e| Error::io(&p, e))
}

fn dispatch(cli: Cli) -> Result<()> {
    if let Command::Rerun(r) = &cli.command {
        let m = RunManifest::load(&r.manifest)?;
        let out = match &cli.out {
            Some(o) => o.clone(),
            None => r
                .manifest
                .parent()
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from(".")),
        };
        return run_job(
            &m.job,
            cli.seed.unwrap_or(m.seed),
            cli.jobs.or(m.jobs),
            &out,
        );
    }
    let file = match &cli.config {
        Some(p) => read_config(p)?,
        None => ConfigFile::default(),
    };
    let seed = cli.seed.or(file.seed).unwrap_or(0);
    let job = resolve(cli.command, file)?;
    let out = cli.out.unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    run_job(&job, seed, cli.jobs, &out)
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_kind() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_USAGE);
        assert_eq!(exit_code(&Error::Degenerate("x".into())), EXIT_DATA);
        assert_eq!(
            exit_code(&Error::Parse {
                line: 1,
                message: "x".into()
            }),
            EXIT_DATA
        );
        assert_eq!(exit_code(&Error::Numerical("x".into())), EXIT_NUMERICAL);
        let wrapped = Error::Training {
            iteration: 3,
            source: Box::new(Error::NonFinite {
                step: 1,
                context: "x".into(),
            }),
        };
        assert_eq!(exit_code(&wrapped), EXIT_NUMERICAL);
    }

    #[test]
    fn job_round_trips_through_json() {
        let job = Job::Benchmark(Suite::default());
        let text = serde_json::to_string(&job).unwrap();
        assert_eq!(serde_json::from_str::<Job>(&text).unwrap(), job);
    }

    #[test]
    fn toml_and_json_configs_share_a_schema() {
        let toml_text = "seed = 3\n[train]\nsteps = 5\nhurst = 0.7\n[evaluate]\npaths = 8\n";
        let json_text =
            r#"{"seed": 3, "train": {"steps": 5, "hurst": 0.7}, "evaluate": {"paths": 8}}"#;
        let a: ConfigFile = toml::from_str(toml_text).unwrap();
        let b: ConfigFile = serde_json::from_str(json_text).unwrap();
        assert_eq!(a.seed, b.seed);
        assert_eq!(a.train, b.train);
        assert_eq!(a.evaluate, b.evaluate);
        assert_eq!(a.train.steps, 5);
        assert_eq!(a.train.paths, 64);
    }

    #[test]
    fn suite_config_parses_generators() {
        let text = r#"
            seeds = 2
            [[datasets]]
            kind = "fou"
            hurst = 0.8
            [[generators]]
            label = "fSDE"
            hurst = "data"
            [[generators]]
            label = "SDE"
            hurst = 0.5
        "#;
        let s: Suite = toml::from_str(text).unwrap();
        assert_eq!(s.seeds, 2);
        assert_eq!(
            s.generators[0].hurst,
            HurstChoice::Source(HurstSource::Data)
        );
        assert_eq!(s.generators[1].hurst, HurstChoice::Fixed(0.5));
        assert_eq!(s.datasets[0].label(), "fOU(0.8)");
    }

    #[test]
    fn flags_override_config() {
        let cli = Cli::try_parse_from(["fsdenet", "simulate", "fou", "--n", "50"]).unwrap();
        let file: ConfigFile = toml::from_str("[simulate]\nhurst = 0.7\nn = 10\n").unwrap();
        let Job::Simulate(j) = resolve(cli.command, file).unwrap() else {
            panic!("wrong job")
        };
        assert_eq!((j.hurst, j.n, j.alpha, j.beta), (0.7, 50, -0.05, 0.1));
    }

    #[test]
    fn missing_hurst_is_a_usage_error() {
        let cli = Cli::try_parse_from(["fsdenet", "simulate", "fbm"]).unwrap();
        let e = resolve(cli.command, ConfigFile::default()).unwrap_err();
        assert_eq!(exit_code(&e), EXIT_USAGE);
    }
}

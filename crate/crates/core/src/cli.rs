//! The `simconf` command line.
//!
//! Every subcommand writes its outputs plus a `manifest.txt` into `--out`.
//! The manifest is a `key=value` file listing every effective option, so
//! `simconf <cmd> --config <out>/manifest.txt --out <elsewhere>` reproduces
//! the run byte for byte. Precedence is flags, then the config file, then
//! built-in defaults.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::conformal::{
    air_calibrate_and_predict, air_set, penalized_calibration_scores, predict_set, AirConfig,
    CalibrationResult, Penalty,
};
use crate::data::{
    load_labels, load_matrix, load_partition, validate_softmax, write_labels, write_matrix,
    write_partition, CalibratedThreshold, ClassPartition, Dtype, FeatureMatrix, MatrixFormat,
    PredictionSet, SimilarityMatrix, SoftmaxMatrix,
};
use crate::error::{bail, Error, Result};
use crate::metrics::{evaluate, run_trials, LambdaChoice, Method, MethodConfig, TrialProtocol};
use crate::rng::{derive_seed, stream, uniform_draw};
use crate::scores::{RapsParams, SapsParams, ScoreFunction, ScoreKind};
use crate::similarity::{class_means, cosine_similarity_matrix, PenaltySource};
use crate::synth::{
    estimate_size_curve, generate, synth_features, verify_exact_properties, FeatureConfig,
    SynthConfig, SynthData,
};
use crate::tuning::{tune_lambda, LambdaGrid};

pub const MANIFEST: &str = "manifest.txt";
pub const THREADS_ENV: &str = "CP_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "simconf",
    version,
    about = "Class-similarity regularized conformal prediction"
)]
#[command(args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute a conformal threshold from calibration softmax and labels.
    Calibrate(CalibrateArgs),
    /// Build prediction sets from a stored threshold.
    Predict(PredictArgs),
    /// Score prediction sets against labels.
    Evaluate(EvaluateArgs),
    /// Pick the penalty weight on a held-out calibration half.
    TuneLambda(TuneArgs),
    /// Build the class similarity matrix from features.
    Similarity(SimilarityArgs),
    /// Generate synthetic grouped data.
    Synth(SynthArgs),
    /// Check the penalty guarantees and the small-lambda size trend on synthetic data.
    VerifyTheory(VerifyArgs),
    /// Repeated random calibration/test splits.
    RunTrials(TrialsArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// key=value file of defaults; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads (also capped by CP_THREADS). Results do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct ScoreArgs {
    #[arg(long, default_value = "lac")]
    pub score: ScoreKind,
    #[arg(long, default_value_t = 1)]
    pub k_reg: usize,
    #[arg(long, default_value_t = 0.01)]
    pub raps_lambda: f64,
    #[arg(long, default_value_t = 0.08)]
    pub saps_lambda: f64,
}

impl ScoreArgs {
    fn function(&self) -> Result<ScoreFunction> {
        Ok(ScoreFunction {
            kind: self.score,
            raps: RapsParams::new(self.raps_lambda, self.k_reg)?,
            saps: SapsParams::new(self.saps_lambda)?,
        })
    }

    fn entries(&self, m: &mut Manifest) {
        m.push("score", self.score);
        m.push("k-reg", self.k_reg);
        m.push("raps-lambda", self.raps_lambda);
        m.push("saps-lambda", self.saps_lambda);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PenaltyChoice {
    None,
    Ma,
    Ms,
    Diag,
    Air,
}

impl PenaltyChoice {
    fn as_str(self) -> &'static str {
        match self {
            PenaltyChoice::None => "none",
            PenaltyChoice::Ma => "ma",
            PenaltyChoice::Ms => "ms",
            PenaltyChoice::Diag => "diag",
            PenaltyChoice::Air => "air",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        <Self as ValueEnum>::from_str(s, true)
            .map_err(|_| Error::Format(format!("unknown penalty kind {s:?}")))
    }
}

impl std::fmt::Display for PenaltyChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Args)]
pub struct PenaltyArgs {
    #[arg(long, value_enum, default_value_t = PenaltyChoice::None)]
    pub penalty: PenaltyChoice,
    /// Class partition CSV (class_id,group_id).
    #[arg(long)]
    pub partition: Option<PathBuf>,
    /// Similarity matrix file.
    #[arg(long)]
    pub similarity: Option<PathBuf>,
}

impl PenaltyArgs {
    fn entries(&self, m: &mut Manifest) {
        m.push("penalty", self.penalty);
        m.push_opt("partition", self.partition.as_ref().map(|p| p.display()));
        m.push_opt("similarity", self.similarity.as_ref().map(|p| p.display()));
    }
}

#[derive(Debug, Clone, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub softmax: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[command(flatten)]
    pub score: ScoreArgs,
    #[command(flatten)]
    pub penalty: PenaltyArgs,
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub softmax: PathBuf,
    /// threshold.csv written by `calibrate`.
    #[arg(long)]
    pub threshold: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub k_reg: usize,
    #[arg(long, default_value_t = 0.01)]
    pub raps_lambda: f64,
    #[arg(long, default_value_t = 0.08)]
    pub saps_lambda: f64,
    #[arg(long)]
    pub partition: Option<PathBuf>,
    #[arg(long)]
    pub similarity: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    /// sets.csv written by `predict`.
    #[arg(long)]
    pub sets: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub partition: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args)]
pub struct TuneArgs {
    #[arg(long)]
    pub softmax: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[command(flatten)]
    pub score: ScoreArgs,
    #[command(flatten)]
    pub penalty: PenaltyArgs,
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    /// Comma-separated grid containing 0; defaults to 0 plus 30 log-spaced values in [1e-3, 2].
    #[arg(long)]
    pub lambda_grid: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args)]
pub struct SimilarityArgs {
    #[arg(long)]
    pub features: PathBuf,
    /// One label per feature row.
    #[arg(long)]
    pub labels: PathBuf,
    /// Number of classes; defaults to the largest label plus one.
    #[arg(long)]
    pub classes: Option<usize>,
    /// Also write similarity.csv.
    #[arg(long)]
    pub emit_csv: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args)]
pub struct SynthFlags {
    #[arg(long, default_value_t = 10)]
    pub groups: usize,
    #[arg(long, default_value_t = 5)]
    pub group_size: usize,
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0.9)]
    pub p0: f64,
    #[arg(long, default_value_t = 1.0)]
    pub concentration: f64,
    #[arg(long, default_value_t = 0.0)]
    pub in_group_boost: f64,
    /// Share of in-group labels equal to the predicted class (default: uniform).
    #[arg(long)]
    pub top_share: Option<f64>,
    /// Feature dimension for synthetic features (0 disables them).
    #[arg(long, default_value_t = 32)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 20)]
    pub features_per_class: usize,
}

impl SynthFlags {
    fn config(&self, seed: u64) -> SynthConfig {
        SynthConfig {
            n_groups: self.groups,
            group_size: self.group_size,
            n_samples: self.samples,
            in_group_mass: self.p0,
            concentration: self.concentration,
            in_group_boost: self.in_group_boost,
            top_share: self.top_share,
            seed,
        }
    }

    fn feature_config(&self, seed: u64) -> FeatureConfig {
        FeatureConfig {
            dim: self.feature_dim,
            per_class: self.features_per_class,
            seed,
            ..FeatureConfig::default()
        }
    }

    fn entries(&self, m: &mut Manifest) {
        m.push("groups", self.groups);
        m.push("group-size", self.group_size);
        m.push("samples", self.samples);
        m.push("p0", self.p0);
        m.push("concentration", self.concentration);
        m.push("in-group-boost", self.in_group_boost);
        m.push_opt("top-share", self.top_share);
        m.push("feature-dim", self.feature_dim);
        m.push("features-per-class", self.features_per_class);
    }
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub synth: SynthFlags,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub synth: SynthFlags,
    #[command(flatten)]
    pub score: ScoreArgs,
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    /// Comma-separated lambda values, starting at 0.
    #[arg(long, default_value = "0,0.01,0.02,0.03,0.05,0.1,0.2,0.3,0.5,1")]
    pub lambdas: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args)]
pub struct TrialsArgs {
    /// Softmax matrix; synthetic data is generated from the synth flags when absent.
    #[arg(long)]
    pub softmax: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Feature matrix used to build the similarity matrix for `--penalty ms`.
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub feature_labels: Option<PathBuf>,
    #[command(flatten)]
    pub score: ScoreArgs,
    #[command(flatten)]
    pub penalty: PenaltyArgs,
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    /// Fixed penalty weight; tuned over the grid when absent.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lambda_grid: Option<String>,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 0.2)]
    pub cal_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub synth: SynthFlags,
    #[command(flatten)]
    pub common: Common,
}

/// Ordered `key=value` echo of a run's configuration.
#[derive(Debug, Default)]
struct Manifest {
    command: &'static str,
    entries: Vec<(String, String)>,
}

impl Manifest {
    fn new(command: &'static str) -> Self {
        Self {
            command,
            entries: Vec::new(),
        }
    }

    fn push(&mut self, key: &str, value: impl std::fmt::Display) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    fn push_opt<T: std::fmt::Display>(&mut self, key: &str, value: Option<T>) {
        if let Some(v) = value {
            self.push(key, v);
        }
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let mut text = format!("# simconf {} {}\n", env!("CARGO_PKG_VERSION"), self.command);
        for (k, v) in &self.entries {
            let _ = writeln!(text, "{k}={v}");
        }
        fs::write(dir.join(MANIFEST), text)?;
        Ok(())
    }
}

/// Parses a `key=value` config file into flag tokens.
pub fn config_tokens(text: &str) -> Result<Vec<OsString>> {
    let mut tokens = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!(Format, "config line {}: expected key=value", lineno + 1);
        };
        let (key, value) = (key.trim(), value.trim());
        match value {
            "true" => tokens.push(format!("--{key}").into()),
            "false" => {}
            _ => {
                tokens.push(format!("--{key}").into());
                tokens.push(value.into());
            }
        }
    }
    Ok(tokens)
}

/// Splices config-file flags in front of the command-line flags so the
/// latter win.
fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(pos) = args.iter().position(|a| a == "--config") else {
        return Ok(args);
    };
    let Some(path) = args.get(pos + 1) else {
        return Ok(args);
    };
    let text = fs::read_to_string(path)?;
    let tokens = config_tokens(&text)?;
    let mut out: Vec<OsString> = args[..2.min(args.len())].to_vec();
    out.extend(tokens);
    out.extend(args[2.min(args.len())..].iter().cloned());
    Ok(out)
}

/// Entry point used by the binary. Returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn thread_count(flag: Option<usize>) -> Option<usize> {
    let env = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok());
    match (flag, env) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    }
    .map(|n| n.max(1))
}

pub fn run(command: Command) -> Result<()> {
    let common = match &command {
        Command::Calibrate(a) => &a.common,
        Command::Predict(a) => &a.common,
        Command::Evaluate(a) => &a.common,
        Command::TuneLambda(a) => &a.common,
        Command::Similarity(a) => &a.common,
        Command::Synth(a) => &a.common,
        Command::VerifyTheory(a) => &a.common,
        Command::RunTrials(a) => &a.common,
    }
    .clone();
    fs::create_dir_all(&common.out)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_count(common.threads) {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| match command {
        Command::Calibrate(a) => cmd_calibrate(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::TuneLambda(a) => cmd_tune(&a),
        Command::Similarity(a) => cmd_similarity(&a),
        Command::Synth(a) => cmd_synth(&a),
        Command::VerifyTheory(a) => cmd_verify(&a),
        Command::RunTrials(a) => cmd_trials(&a),
    })
}

pub fn load_softmax(path: &Path) -> Result<SoftmaxMatrix> {
    validate_softmax(load_matrix(path, MatrixFormat::from_path(path))?)
}

pub fn load_similarity(path: &Path) -> Result<SimilarityMatrix> {
    SimilarityMatrix::from_matrix(load_matrix(path, MatrixFormat::from_path(path))?)
}

fn require<'a>(path: &'a Option<PathBuf>, what: &str, penalty: PenaltyChoice) -> Result<&'a Path> {
    match path {
        Some(p) => Ok(p),
        None => bail!(Config, "--penalty {penalty} needs --{what}"),
    }
}

fn load_source(
    kind: PenaltyChoice,
    partition: &Option<PathBuf>,
    similarity: &Option<PathBuf>,
    n_classes: usize,
) -> Result<Option<PenaltySource>> {
    let source = match kind {
        PenaltyChoice::None | PenaltyChoice::Air => return Ok(None),
        PenaltyChoice::Ma => {
            PenaltySource::MaBinary(load_partition(require(partition, "partition", kind)?)?)
        }
        PenaltyChoice::Ms => {
            PenaltySource::MsSoft(load_similarity(require(similarity, "similarity", kind)?)?)
        }
        PenaltyChoice::Diag => PenaltySource::MaDiag,
    };
    source.check_classes(n_classes)?;
    Ok(Some(source))
}

fn load_air_partition(
    kind: PenaltyChoice,
    partition: &Option<PathBuf>,
    n_classes: usize,
) -> Result<ClassPartition> {
    let p = load_partition(require(partition, "partition", kind)?)?;
    if p.n_classes() != n_classes {
        bail!(
            Config,
            "partition covers {} classes, softmax has {n_classes}",
            p.n_classes()
        );
    }
    Ok(p)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub const THRESHOLD_HEADER: &str = "q_hat,alpha,n_cal,lambda,score_kind,penalty_kind,seed";

/// Threshold file contents.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdRecord {
    pub threshold: CalibratedThreshold,
    pub score_kind: ScoreKind,
    pub penalty: PenaltyChoice,
    pub seed: u64,
}

impl ThresholdRecord {
    pub fn to_csv(&self) -> String {
        let t = &self.threshold;
        format!(
            "{THRESHOLD_HEADER}\n{},{},{},{},{},{},{}\n",
            t.q_hat, t.alpha, t.n_cal, t.lambda, self.score_kind, self.penalty, self.seed
        )
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next().map(str::trim) != Some(THRESHOLD_HEADER) {
            bail!(
                Format,
                "threshold file must start with header {THRESHOLD_HEADER:?}"
            );
        }
        let Some(row) = lines.next() else {
            bail!(Format, "threshold file has no data row");
        };
        let f: Vec<&str> = row.split(',').map(str::trim).collect();
        if f.len() != 7 {
            bail!(Format, "threshold row needs 7 fields, got {}", f.len());
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::Format(format!("bad number {s:?}")))
        };
        Ok(Self {
            threshold: CalibratedThreshold {
                q_hat: num(f[0])?,
                alpha: num(f[1])?,
                n_cal: f[2]
                    .parse()
                    .map_err(|_| Error::Format(format!("bad n_cal {:?}", f[2])))?,
                lambda: num(f[3])?,
            },
            score_kind: f[4].parse()?,
            penalty: PenaltyChoice::parse(f[5])?,
            seed: f[6]
                .parse()
                .map_err(|_| Error::Format(format!("bad seed {:?}", f[6])))?,
        })
    }
}

fn cmd_calibrate(a: &CalibrateArgs) -> Result<()> {
    let softmax = load_softmax(&a.softmax)?;
    let labels = load_labels(&a.labels, softmax.n_classes())?;
    let score_fn = a.score.function()?;
    let draw_seed = derive_seed(a.seed, stream::SCORE_DRAWS);
    let threshold = if a.penalty.penalty == PenaltyChoice::Air {
        let partition = load_air_partition(
            PenaltyChoice::Air,
            &a.penalty.partition,
            softmax.n_classes(),
        )?;
        let config = AirConfig {
            partition,
            alpha: a.alpha,
            seed: a.seed,
        };
        air_calibrate_and_predict(&softmax, &labels, &softmax.select_rows(&[0]), &config)?.0
    } else {
        let source = load_source(
            a.penalty.penalty,
            &a.penalty.partition,
            &a.penalty.similarity,
            softmax.n_classes(),
        )?;
        let penalty = source.as_ref().map(|s| Penalty::new(s, a.lambda));
        let scores =
            penalized_calibration_scores(&softmax, &labels, &score_fn, penalty, draw_seed)?;
        let lambda = if source.is_some() { a.lambda } else { 0.0 };
        CalibrationResult::compute(&scores, a.alpha, lambda)?.threshold
    };
    let record = ThresholdRecord {
        threshold,
        score_kind: a.score.score,
        penalty: a.penalty.penalty,
        seed: a.seed,
    };
    fs::write(a.common.out.join("threshold.csv"), record.to_csv())?;

    let mut m = Manifest::new("calibrate");
    m.push("softmax", a.softmax.display());
    m.push("labels", a.labels.display());
    a.score.entries(&mut m);
    a.penalty.entries(&mut m);
    m.push("alpha", a.alpha);
    m.push("lambda", a.lambda);
    m.push("seed", a.seed);
    m.write(&a.common.out)
}

pub const SETS_HEADER: &str = "sample,predicted_class,size,classes";

pub fn sets_to_csv(sets: &[PredictionSet]) -> String {
    let mut out = format!("{SETS_HEADER}\n");
    for (i, s) in sets.iter().enumerate() {
        let classes: Vec<String> = s.classes().iter().map(usize::to_string).collect();
        let _ = writeln!(
            out,
            "{i},{},{},{}",
            s.predicted_class(),
            s.len(),
            classes.join(" ")
        );
    }
    out
}

pub fn sets_from_csv(text: &str) -> Result<Vec<PredictionSet>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(SETS_HEADER) {
        bail!(
            Format,
            "prediction set file must start with header {SETS_HEADER:?}"
        );
    }
    let mut sets = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Format(format!("sets line {}: {line:?}", lineno + 2));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad());
        }
        let predicted: usize = f[1].trim().parse().map_err(|_| bad())?;
        let mut classes = f[3]
            .split_whitespace()
            .map(|c| c.parse::<usize>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        classes.sort_unstable();
        classes.dedup();
        sets.push(PredictionSet::new(classes, predicted));
    }
    Ok(sets)
}

fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let softmax = load_softmax(&a.softmax)?;
    let record = ThresholdRecord::from_csv(&fs::read_to_string(&a.threshold)?)?;
    let score_fn = ScoreFunction {
        kind: record.score_kind,
        raps: RapsParams::new(a.raps_lambda, a.k_reg)?,
        saps: SapsParams::new(a.saps_lambda)?,
    };
    let t = record.threshold;
    let sets: Vec<PredictionSet> = if record.penalty == PenaltyChoice::Air {
        let partition = load_air_partition(PenaltyChoice::Air, &a.partition, softmax.n_classes())?;
        (0..softmax.n_samples())
            .map(|i| air_set(softmax.row(i), t.q_hat, &partition))
            .collect()
    } else {
        let source = load_source(
            record.penalty,
            &a.partition,
            &a.similarity,
            softmax.n_classes(),
        )?;
        let penalty = source.as_ref().map(|s| Penalty::new(s, t.lambda));
        let draw_seed = derive_seed(record.seed, stream::TEST_DRAWS);
        use rayon::prelude::*;
        (0..softmax.n_samples())
            .into_par_iter()
            .map(|i| {
                predict_set(
                    softmax.row(i),
                    &t,
                    &score_fn,
                    penalty,
                    uniform_draw(draw_seed, i),
                )
            })
            .collect()
    };
    fs::write(a.common.out.join("sets.csv"), sets_to_csv(&sets))?;

    let mut m = Manifest::new("predict");
    m.push("softmax", a.softmax.display());
    m.push("threshold", a.threshold.display());
    m.push("k-reg", a.k_reg);
    m.push("raps-lambda", a.raps_lambda);
    m.push("saps-lambda", a.saps_lambda);
    m.push_opt("partition", a.partition.as_ref().map(|p| p.display()));
    m.push_opt("similarity", a.similarity.as_ref().map(|p| p.display()));
    m.write(&a.common.out)
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let sets = sets_from_csv(&fs::read_to_string(&a.sets)?)?;
    let partition = a.partition.as_deref().map(load_partition).transpose()?;
    let n_classes = partition
        .as_ref()
        .map_or(usize::MAX, ClassPartition::n_classes);
    let labels = load_labels(&a.labels, n_classes)?;
    let r = evaluate(&sets, &labels, partition.as_ref(), a.alpha)?;
    let text = format!(
        "n_test,avg_size,avg_superclasses,coverage,top_cov_gap,empty_set_fraction\n{},{},{},{},{},{}\n",
        r.n_test,
        r.avg_size,
        fmt_opt(r.avg_superclasses),
        r.marginal_coverage,
        r.top_cov_gap,
        r.empty_set_fraction
    );
    fs::write(a.common.out.join("metrics.csv"), text)?;

    let mut m = Manifest::new("evaluate");
    m.push("sets", a.sets.display());
    m.push("labels", a.labels.display());
    m.push_opt("partition", a.partition.as_ref().map(|p| p.display()));
    m.push("alpha", a.alpha);
    m.write(&a.common.out)
}

fn parse_grid(text: &Option<String>) -> Result<LambdaGrid> {
    text.as_deref()
        .map_or_else(|| Ok(LambdaGrid::default()), LambdaGrid::parse)
}

fn cmd_tune(a: &TuneArgs) -> Result<()> {
    let softmax = load_softmax(&a.softmax)?;
    let labels = load_labels(&a.labels, softmax.n_classes())?;
    let Some(source) = load_source(
        a.penalty.penalty,
        &a.penalty.partition,
        &a.penalty.similarity,
        softmax.n_classes(),
    )?
    else {
        bail!(Config, "tune-lambda needs --penalty ma, ms or diag");
    };
    let superclasses = a
        .penalty
        .partition
        .as_deref()
        .map(load_partition)
        .transpose()?;
    let grid = parse_grid(&a.lambda_grid)?;
    let report = tune_lambda(
        &softmax,
        &labels,
        &grid,
        &a.score.function()?,
        &source,
        a.alpha,
        a.seed,
        superclasses.as_ref(),
    )?;
    let mut text = String::from("lambda,avg_size,avg_superclasses\n");
    for r in &report.rows {
        let _ = writeln!(
            text,
            "{},{},{}",
            r.lambda,
            r.avg_size,
            fmt_opt(r.avg_superclasses)
        );
    }
    fs::write(a.common.out.join("tuning.csv"), text)?;
    let chosen = report.chosen();
    fs::write(
        a.common.out.join("tuning_choice.csv"),
        format!(
            "chosen_lambda,avg_size,avg_superclasses\n{},{},{}\n",
            chosen.lambda,
            chosen.avg_size,
            fmt_opt(chosen.avg_superclasses)
        ),
    )?;

    let mut m = Manifest::new("tune-lambda");
    m.push("softmax", a.softmax.display());
    m.push("labels", a.labels.display());
    a.score.entries(&mut m);
    a.penalty.entries(&mut m);
    m.push("alpha", a.alpha);
    m.push_opt("lambda-grid", a.lambda_grid.as_ref());
    m.push("seed", a.seed);
    m.write(&a.common.out)
}

fn similarity_from_features(
    features: &Path,
    labels: &Path,
    classes: Option<usize>,
) -> Result<SimilarityMatrix> {
    let values = load_matrix(features, MatrixFormat::from_path(features))?;
    let labels = load_labels(labels, classes.unwrap_or(usize::MAX))?;
    let n_classes = classes.unwrap_or_else(|| labels.as_slice().iter().max().map_or(0, |m| m + 1));
    let features = FeatureMatrix::new(values, labels)?;
    Ok(cosine_similarity_matrix(&class_means(
        &features, n_classes,
    )?))
}

fn cmd_similarity(a: &SimilarityArgs) -> Result<()> {
    let m_sim = similarity_from_features(&a.features, &a.labels, a.classes)?;
    let out = &a.common.out;
    write_matrix(
        &out.join("similarity.cpm"),
        m_sim.as_matrix(),
        MatrixFormat::Binary,
        Dtype::F64,
    )?;
    if a.emit_csv {
        write_matrix(
            &out.join("similarity.csv"),
            m_sim.as_matrix(),
            MatrixFormat::Csv,
            Dtype::F64,
        )?;
    }
    let mut m = Manifest::new("similarity");
    m.push("features", a.features.display());
    m.push("labels", a.labels.display());
    m.push_opt("classes", a.classes);
    m.push("emit-csv", a.emit_csv);
    m.write(out)
}

fn write_synth(dir: &Path, data: &SynthData, features: Option<&FeatureMatrix>) -> Result<()> {
    write_matrix(
        &dir.join("softmax.cpm"),
        data.softmax.as_matrix(),
        MatrixFormat::Binary,
        Dtype::F64,
    )?;
    write_labels(&dir.join("labels.txt"), &data.labels)?;
    write_partition(&dir.join("partition.csv"), &data.partition)?;
    if let Some(f) = features {
        write_matrix(
            &dir.join("features.cpm"),
            f.values(),
            MatrixFormat::Binary,
            Dtype::F64,
        )?;
        write_labels(&dir.join("feature_labels.txt"), f.labels())?;
    }
    Ok(())
}

fn synth_features_opt(
    flags: &SynthFlags,
    partition: &ClassPartition,
    seed: u64,
) -> Result<Option<FeatureMatrix>> {
    if flags.feature_dim == 0 {
        return Ok(None);
    }
    synth_features(partition, &flags.feature_config(seed)).map(Some)
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let data = generate(&a.synth.config(a.seed))?;
    let features = synth_features_opt(&a.synth, &data.partition, a.seed)?;
    write_synth(&a.common.out, &data, features.as_ref())?;
    let mut m = Manifest::new("synth");
    a.synth.entries(&mut m);
    m.push("seed", a.seed);
    m.write(&a.common.out)
}

fn cmd_verify(a: &VerifyArgs) -> Result<()> {
    let data = generate(&a.synth.config(a.seed))?;
    let lambdas: Vec<f64> = LambdaGrid::parse(&a.lambdas)?.values().to_vec();
    let score_fn = a.score.function()?;
    let source = PenaltySource::MaBinary(data.partition.clone());
    let est = estimate_size_curve(&data, &score_fn, &source, a.alpha, &lambdas, a.seed)?;
    let exact = verify_exact_properties(&data, &score_fn, a.alpha, &lambdas, a.seed)?;
    let out = &a.common.out;

    let mut curve = String::from("lambda,size,superclasses\n");
    for p in &est.size_curve {
        let _ = writeln!(curve, "{},{},{}", p.lambda, p.size, fmt_opt(p.superclasses));
    }
    fs::write(out.join("size_curve.csv"), curve)?;
    fs::write(
        out.join("theory_report.csv"),
        format!(
            "p0_hat,p1_hat,n0_bar,n1_bar,slope,slope_se,derivative_sign,predicted_sign\n{},{},{},{},{},{},{},{}\n",
            est.p0_hat, est.p1_hat, est.n0_bar, est.n1_bar, est.slope, est.slope_se, est.derivative_sign, est.predicted_sign
        ),
    )?;
    fs::write(
        out.join("exact_properties.csv"),
        format!(
            "lambdas,sample_checks,threshold_violations,sample_violations,passed,first_counterexample\n{},{},{},{},{},{}\n",
            exact.lambdas,
            exact.sample_checks,
            exact.threshold_violations,
            exact.sample_violations,
            exact.passed(),
            exact.first_counterexample.as_deref().unwrap_or("")
        ),
    )?;

    let mut m = Manifest::new("verify-theory");
    a.synth.entries(&mut m);
    a.score.entries(&mut m);
    m.push("alpha", a.alpha);
    m.push("lambdas", &a.lambdas);
    m.push("seed", a.seed);
    m.write(out)
}

fn cmd_trials(a: &TrialsArgs) -> Result<()> {
    let (softmax, labels, synthetic) = match (&a.softmax, &a.labels) {
        (Some(s), Some(l)) => {
            let softmax = load_softmax(s)?;
            let labels = load_labels(l, softmax.n_classes())?;
            (softmax, labels, None)
        }
        (None, None) => {
            let data = generate(&a.synth.config(a.seed))?;
            (data.softmax.clone(), data.labels.clone(), Some(data))
        }
        _ => bail!(Config, "--softmax and --labels go together"),
    };
    let c = softmax.n_classes();
    let partition = match (&a.penalty.partition, &synthetic) {
        (Some(p), _) => Some(load_partition(p)?),
        (None, Some(d)) => Some(d.partition.clone()),
        (None, None) => None,
    };
    if let Some(p) = &partition {
        if p.n_classes() != c {
            bail!(
                Config,
                "partition covers {} classes, softmax has {c}",
                p.n_classes()
            );
        }
    }

    let need_partition = || {
        partition.clone().ok_or_else(|| {
            Error::Config(format!("--penalty {} needs --partition", a.penalty.penalty))
        })
    };
    let lambda = match a.lambda {
        Some(l) => LambdaChoice::Fixed(l),
        None => LambdaChoice::Tuned(parse_grid(&a.lambda_grid)?),
    };
    let method = match a.penalty.penalty {
        PenaltyChoice::None => Method::Standard,
        PenaltyChoice::Air => Method::Air(need_partition()?),
        PenaltyChoice::Ma => Method::Penalized {
            source: PenaltySource::MaBinary(need_partition()?),
            lambda,
        },
        PenaltyChoice::Diag => Method::Penalized {
            source: PenaltySource::MaDiag,
            lambda,
        },
        PenaltyChoice::Ms => {
            let matrix = match (
                &a.penalty.similarity,
                &a.features,
                &a.feature_labels,
                &synthetic,
            ) {
                (Some(path), _, _, _) => load_similarity(path)?,
                (None, Some(f), Some(l), _) => similarity_from_features(f, l, Some(c))?,
                (None, None, None, Some(d)) => {
                    let features = synth_features(&d.partition, &a.synth.feature_config(a.seed))?;
                    cosine_similarity_matrix(&class_means(&features, c)?)
                }
                _ => bail!(
                    Config,
                    "--penalty ms needs --similarity or --features with --feature-labels"
                ),
            };
            Method::Penalized {
                source: PenaltySource::MsSoft(matrix),
                lambda,
            }
        }
    };
    let config = MethodConfig {
        score: a.score.function()?,
        method,
        alpha: a.alpha,
        metrics_partition: partition,
    };
    let protocol = TrialProtocol {
        n_trials: a.trials,
        cal_fraction: a.cal_fraction,
        seed: a.seed,
    };
    let outcome = run_trials(&softmax, &labels, &protocol, &config)?;
    let name = config.method.name();
    let score = a.score.score;

    let mut trials =
        String::from("trial,method,score,lambda,avg_size,avg_superclasses,coverage,top_cov_gap\n");
    for r in &outcome.records {
        let _ = writeln!(
            trials,
            "{},{name},{score},{},{},{},{},{}",
            r.trial,
            r.lambda,
            r.report.avg_size,
            fmt_opt(r.report.avg_superclasses),
            r.report.marginal_coverage,
            r.report.top_cov_gap
        );
    }
    let g = &outcome.aggregate;
    let mut summary = String::from("method,score,metric,mean,std,trials\n");
    let mut row = |metric: &str, s: Option<crate::metrics::MetricSummary>| {
        if let Some(s) = s {
            let _ = writeln!(
                summary,
                "{name},{score},{metric},{},{},{}",
                s.mean, s.std, g.n_trials
            );
        }
    };
    row("lambda", Some(g.lambda));
    row("avg_size", Some(g.avg_size));
    row("avg_superclasses", g.avg_superclasses);
    row("coverage", Some(g.coverage));
    row("top_cov_gap", Some(g.top_cov_gap));
    row("empty_set_fraction", Some(g.empty_set_fraction));
    fs::write(a.common.out.join("trials.csv"), trials)?;
    fs::write(a.common.out.join("summary.csv"), summary)?;

    let mut m = Manifest::new("run-trials");
    m.push_opt("softmax", a.softmax.as_ref().map(|p| p.display()));
    m.push_opt("labels", a.labels.as_ref().map(|p| p.display()));
    m.push_opt("features", a.features.as_ref().map(|p| p.display()));
    m.push_opt(
        "feature-labels",
        a.feature_labels.as_ref().map(|p| p.display()),
    );
    a.score.entries(&mut m);
    a.penalty.entries(&mut m);
    m.push("alpha", a.alpha);
    m.push_opt("lambda", a.lambda);
    m.push_opt("lambda-grid", a.lambda_grid.as_ref());
    m.push("trials", a.trials);
    m.push("cal-fraction", a.cal_fraction);
    m.push("seed", a.seed);
    if synthetic.is_some() {
        a.synth.entries(&mut m);
    }
    m.write(&a.common.out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_record_round_trip() {
        let r = ThresholdRecord {
            threshold: CalibratedThreshold {
                q_hat: f64::INFINITY,
                alpha: 0.05,
                n_cal: 10,
                lambda: 0.3,
            },
            score_kind: ScoreKind::Raps,
            penalty: PenaltyChoice::Ma,
            seed: 12,
        };
        assert_eq!(ThresholdRecord::from_csv(&r.to_csv()).unwrap(), r);
        assert!(ThresholdRecord::from_csv("q_hat\n1").is_err());
    }

    #[test]
    fn sets_round_trip_with_empty_set() {
        let sets = vec![
            PredictionSet::new(vec![0, 3], 0),
            PredictionSet::new(vec![], 2),
        ];
        assert_eq!(sets_from_csv(&sets_to_csv(&sets)).unwrap(), sets);
    }

    #[test]
    fn config_tokens_parse() {
        let t = config_tokens("# comment\nalpha=0.05\nemit-csv=true\nflag=false\n").unwrap();
        let t: Vec<String> = t.into_iter().map(|s| s.into_string().unwrap()).collect();
        assert_eq!(t, vec!["--alpha", "0.05", "--emit-csv"]);
        assert!(config_tokens("novalue").is_err());
    }

    #[test]
    fn bad_flags_exit_two() {
        assert_eq!(main_with_args(["simconf", "calibrate", "--bogus"]), 2);
        assert_eq!(main_with_args(["simconf", "no-such-command"]), 2);
    }

    #[test]
    fn data_errors_exit_one() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o");
        let code = main_with_args([
            "simconf".as_ref(),
            "calibrate".as_ref(),
            "--softmax".as_ref(),
            dir.path().join("missing.cpm").as_os_str(),
            "--labels".as_ref(),
            dir.path().join("missing.txt").as_os_str(),
            "--out".as_ref(),
            out.as_os_str(),
        ] as [&std::ffi::OsStr; 8]);
        assert_eq!(code, 1);
    }
}

//! Subcommands of the `dum` binary. Every command writes its artifacts plus
//! a `<out>.manifest.json` run record; reports go to stdout and diagnostics
//! to stderr.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use dum_core::baselines::BaselineConfig;
use dum_core::data::{
    corrupt, minmax_scale, read_table, save_csv, synthesize, ColumnRef, CorruptionKind, CorruptionSpec, CsvOptions,
    Delimiter, EmbeddingBatch, LabelRule, MinMaxScaler, Recipe, SynthPreset, SynthSpec,
};
use dum_core::dum::{LossConfig, LossVariant};
use dum_core::eval::MetricsReport;
use dum_core::scoring::{score, NormKind, ScoredDataset};
use dum_core::trainer::{train_with_observer, AugmentConfig, Checkpoint, TrainConfig};
use dum_core::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;
pub const EXIT_FORMAT: i32 = 5;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Core(e) => match e {
                Error::Argument(_) => EXIT_CONFIG,
                Error::Divergence { .. } => EXIT_DIVERGENCE,
                Error::Format(_) | Error::FormatVersion { .. } => EXIT_FORMAT,
                _ => EXIT_DATA,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "dum", version, about = "Deep uncertainty models: training, scoring and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labelled synthetic table.
    Synth(SynthArgs),
    /// Build a labelled table from raw benchmark files and a recipe.
    Prepare(PrepareArgs),
    /// Train a variance head and write a checkpoint.
    Train(TrainArgs),
    /// Score every row by the norm of its predicted variance.
    Score(ScoreArgs),
    /// AUROC and Welch t-test of labelled scores.
    Eval(EvalArgs),
    /// Score rows with a classical detector.
    Baseline(BaselineArgs),
    /// Apply a seeded corruption to the feature columns.
    Corrupt(CorruptArgs),
    /// Compare scores of a clean and a suspect table under one model.
    ShiftTest(ShiftArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PresetArg {
    Anomaly,
    Clusters,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value = "anomaly")]
    pub preset: PresetArg,
    /// Inlier count (`anomaly`) or total count (`clusters`).
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub n_out: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub spread: Option<f64>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Skip min-max scaling.
    #[arg(long)]
    pub raw: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[arg(long)]
    pub recipe: PathBuf,
    /// Directory holding the raw files named by the recipe.
    #[arg(long = "data-dir", alias = "data")]
    pub data_dir: PathBuf,
    /// Invert the recipe's outlier labels.
    #[arg(long)]
    pub flip_labels: bool,
    #[arg(long)]
    pub raw: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LossArg {
    Plain,
    Infonce,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AugmentArg {
    Identity,
    Jitter,
    Dropout,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint path; the loss history goes to `<out>.loss.csv`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 2)]
    pub m: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, value_enum, default_value = "infonce")]
    pub loss: LossArg,
    #[arg(long, default_value_t = 0.07)]
    pub tau: f64,
    /// L2-normalise fused means before the loss.
    #[arg(long)]
    pub normalize_means: bool,
    #[arg(long, default_value_t = 4096)]
    pub hidden: usize,
    #[arg(long, value_enum, default_value = "identity")]
    pub augment: AugmentArg,
    /// σ for `jitter`, p for `dropout`.
    #[arg(long, default_value_t = 0.0)]
    pub augment_param: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Train on features as given instead of min-max scaling them.
    #[arg(long)]
    pub no_scale: bool,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "l2")]
    pub norm: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Scores CSV with a `label` column.
    #[arg(long, alias = "data")]
    pub scores: PathBuf,
    /// Report path; defaults to `<scores>.metrics.txt`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Knn,
    Lesinn,
    Iforest,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub method: MethodArg,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// LeSiNN subsample size.
    #[arg(long, default_value_t = 8)]
    pub s: usize,
    /// LeSiNN ensemble size.
    #[arg(long, default_value_t = 50)]
    pub e: usize,
    #[arg(long, default_value_t = 100)]
    pub trees: usize,
    /// Isolation-forest subsample size; defaults to min(256, n).
    #[arg(long)]
    pub psi: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KindArg {
    Gaussian,
    Uniform,
    Impulse,
    Dropout,
    Scale,
    Smooth,
}

#[derive(Debug, Args)]
pub struct CorruptArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub kind: KindArg,
    #[arg(long, default_value_t = 0.1)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0.1)]
    pub amplitude: f64,
    #[arg(long, default_value_t = 0.05)]
    pub rate: f64,
    #[arg(long, default_value_t = 1.0)]
    pub magnitude: f64,
    #[arg(long, default_value_t = 0.1)]
    pub p: f64,
    #[arg(long, default_value_t = 0.5)]
    pub factor: f64,
    #[arg(long, default_value_t = 3)]
    pub window: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ShiftArgs {
    #[arg(long)]
    pub clean: PathBuf,
    #[arg(long)]
    pub suspect: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "l2")]
    pub norm: String,
    #[arg(long, default_value_t = 0.01)]
    pub p_threshold: f64,
    /// Report path; defaults to `<suspect>.shift.txt`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Reads a comma-separated table with a header; a column named `label`
/// becomes 0/1 outlier labels.
pub fn read_dataset(path: &Path) -> CliResult<EmbeddingBatch> {
    let file = File::open(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let table = read_table(file, &path.display().to_string(), Delimiter::Char(b','), true)?;
    let has_label = table.header.as_ref().is_some_and(|h| h.iter().any(|c| c == "label"));
    let opts = CsvOptions {
        label_column: has_label.then(|| ColumnRef::Name("label".into())),
        label_rule: LabelRule::Numeric,
        ..CsvOptions::default()
    };
    Ok(table.into_batch(&opts)?)
}

fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| {
        Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

struct Run {
    command: &'static str,
    started: Instant,
    inputs: Vec<PathBuf>,
}

impl Run {
    fn new(command: &'static str, inputs: &[&Path]) -> Self {
        Self {
            command,
            started: Instant::now(),
            inputs: inputs.iter().map(|p| p.to_path_buf()).collect(),
        }
    }

    /// Writes the run record next to the first artifact.
    fn finish(self, config: Value, seed: Option<u64>, artifacts: &[&Path]) -> CliResult<()> {
        let mut inputs = serde_json::Map::new();
        for p in &self.inputs {
            inputs.insert(p.display().to_string(), Value::String(sha256_file(p)?));
        }
        let mut outputs = serde_json::Map::new();
        for p in artifacts {
            outputs.insert(p.display().to_string(), Value::String(sha256_file(p)?));
        }
        let manifest = json!({
            "command": self.command,
            "config": config,
            "seed": seed,
            "inputs": inputs,
            "artifacts": outputs,
            "wall_clock_seconds": self.started.elapsed().as_secs_f64(),
            "version": env!("CARGO_PKG_VERSION"),
        });
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
        write_text(&with_suffix(artifacts[0], ".manifest.json"), &(text + "\n"))
    }
}

fn parse_norm(s: &str) -> CliResult<NormKind> {
    s.parse::<NormKind>().map_err(|e| CliError::Config(e.to_string()))
}

pub fn cmd_synth(a: &SynthArgs) -> CliResult<String> {
    let run = Run::new("synth", &[]);
    let mut spec = match a.preset {
        PresetArg::Anomaly => SynthSpec::anomaly_default(a.seed),
        PresetArg::Clusters => SynthSpec::clusters_default(a.n.unwrap_or(3000), a.seed),
    };
    match &mut spec.preset {
        SynthPreset::ClustersPlusOutliers { k, spread, n_in, n_out, .. } => {
            *k = a.k.unwrap_or(*k);
            *spread = a.spread.unwrap_or(*spread);
            *n_in = a.n.unwrap_or(*n_in);
            *n_out = a.n_out.unwrap_or(*n_out);
        }
        SynthPreset::Clusters { k, spread, .. } => {
            if a.n_out.is_some() {
                return Err(CliError::Config("--n-out applies only to the anomaly preset".into()));
            }
            *k = a.k.unwrap_or(*k);
            *spread = a.spread.unwrap_or(*spread);
        }
    }
    spec.dim = a.dim.unwrap_or(spec.dim);
    let mut batch = synthesize(&spec)?;
    if !a.raw {
        batch = minmax_scale(&batch)?;
    }
    save_csv(&batch, &a.out)?;
    run.finish(json!({ "spec": spec, "scaled": !a.raw }), Some(a.seed), &[&a.out])?;
    Ok(format!("wrote {} rows x {} columns to {}\n", batch.len(), batch.dim(), a.out.display()))
}

pub fn cmd_prepare(a: &PrepareArgs) -> CliResult<String> {
    let recipe = Recipe::load(&a.recipe)?;
    let inputs: Vec<PathBuf> = recipe.sources.iter().map(|s| a.data_dir.join(s)).collect();
    let mut all: Vec<&Path> = vec![&a.recipe];
    all.extend(inputs.iter().map(PathBuf::as_path));
    let run = Run::new("prepare", &all);
    let mut batch = recipe.apply(&a.data_dir)?;
    if a.flip_labels {
        if let Some(l) = batch.labels.as_mut() {
            l.iter_mut().for_each(|v| *v = !*v);
        }
    }
    if !a.raw {
        batch = minmax_scale(&batch)?;
    }
    save_csv(&batch, &a.out)?;
    let outliers = batch.labels.as_ref().map_or(0, |l| l.iter().filter(|v| **v).count());
    run.finish(json!({ "recipe": recipe, "flip_labels": a.flip_labels, "scaled": !a.raw }), None, &[&a.out])?;
    Ok(format!(
        "{}: {} rows x {} columns, {} outliers -> {}\n",
        recipe.name,
        batch.len(),
        batch.dim(),
        outliers,
        a.out.display()
    ))
}

pub fn train_config(a: &TrainArgs) -> TrainConfig {
    TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        m: a.m,
        hidden: a.hidden,
        learning_rate: a.lr,
        loss: LossConfig {
            variant: match a.loss {
                LossArg::Plain => LossVariant::PlainDot,
                LossArg::Infonce => LossVariant::InfoNce,
            },
            temperature: a.tau,
            normalize_poe_means: a.normalize_means,
        },
        seed: a.seed,
        augmentation: match a.augment {
            AugmentArg::Identity => AugmentConfig::Identity,
            AugmentArg::Jitter => AugmentConfig::GaussianJitter { sigma: a.augment_param },
            AugmentArg::Dropout => AugmentConfig::FeatureDropout { p: a.augment_param },
        },
    }
}

pub fn cmd_train(a: &TrainArgs) -> CliResult<String> {
    let run = Run::new("train", &[&a.data]);
    let cfg = train_config(a);
    cfg.validate()?;
    let data = read_dataset(&a.data)?;
    let scaler = if a.no_scale { None } else { Some(MinMaxScaler::fit(&data.features)?) };
    let features = match &scaler {
        Some(s) => s.transform(&data.features)?,
        None => data.features.clone(),
    };
    let outcome = train_with_observer(&features, &cfg, |epoch, loss| {
        eprintln!("epoch {:>4}  loss {loss:.6}", epoch + 1);
    })?;
    let mut checkpoint = outcome.checkpoint;
    checkpoint.scaler = scaler;
    checkpoint.save(&a.out)?;
    let loss_path = with_suffix(&a.out, ".loss.csv");
    let mut text = String::from("epoch,loss\n");
    for (i, l) in outcome.loss_history.iter().enumerate() {
        text.push_str(&format!("{},{l}\n", i + 1));
    }
    write_text(&loss_path, &text)?;
    run.finish(json!({ "train": cfg, "scaled": !a.no_scale }), Some(a.seed), &[&a.out, &loss_path])?;
    let last = outcome.loss_history.last().map_or("n/a".into(), |l| format!("{l:.6}"));
    Ok(format!(
        "trained {} epochs on {} rows (final loss {last}) -> {}\n",
        cfg.epochs,
        data.len(),
        a.out.display()
    ))
}

fn scaled_for(checkpoint: &Checkpoint, batch: &EmbeddingBatch) -> CliResult<EmbeddingBatch> {
    Ok(match &checkpoint.scaler {
        Some(s) => s.transform_batch(batch)?,
        None => batch.clone(),
    })
}

pub fn cmd_score(a: &ScoreArgs) -> CliResult<String> {
    let run = Run::new("score", &[&a.data, &a.model]);
    let norm = parse_norm(&a.norm)?;
    let checkpoint = Checkpoint::load(&a.model)?;
    let data = scaled_for(&checkpoint, &read_dataset(&a.data)?)?;
    let scored = score(&checkpoint.net, &data, norm)?;
    scored.save(&a.out)?;
    run.finish(json!({ "norm": norm }), None, &[&a.out])?;
    Ok(format!("scored {} rows -> {}\n", scored.scores.len(), a.out.display()))
}

fn report(scored: &ScoredDataset, source: &Path) -> CliResult<MetricsReport> {
    let labels = scored
        .labels
        .as_ref()
        .ok_or_else(|| Error::Data(format!("{}: evaluation needs a `label` column", source.display())))?;
    Ok(MetricsReport::from_labels(&scored.scores, labels)?)
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult<String> {
    let run = Run::new("eval", &[&a.scores]);
    let scored = ScoredDataset::load(&a.scores)?;
    let text = report(&scored, &a.scores)?.to_text();
    let out = a.out.clone().unwrap_or_else(|| with_suffix(&a.scores, ".metrics.txt"));
    write_text(&out, &text)?;
    run.finish(json!({}), None, &[&out])?;
    Ok(text)
}

pub fn cmd_baseline(a: &BaselineArgs) -> CliResult<String> {
    let run = Run::new("baseline", &[&a.data]);
    let cfg = match a.method {
        MethodArg::Knn => BaselineConfig::Knn { k: a.k },
        MethodArg::Lesinn => BaselineConfig::Lesinn {
            s: a.s,
            e: a.e,
            seed: a.seed,
        },
        MethodArg::Iforest => BaselineConfig::Iforest {
            t: a.trees,
            psi: a.psi,
            seed: a.seed,
        },
    };
    let data = read_dataset(&a.data)?;
    let scored = ScoredDataset {
        scores: cfg.score(&data.features)?,
        labels: data.labels,
    };
    scored.save(&a.out)?;
    run.finish(json!({ "baseline": cfg }), Some(a.seed), &[&a.out])?;
    Ok(format!("scored {} rows -> {}\n", scored.scores.len(), a.out.display()))
}

pub fn cmd_corrupt(a: &CorruptArgs) -> CliResult<String> {
    let run = Run::new("corrupt", &[&a.data]);
    let kind = match a.kind {
        KindArg::Gaussian => CorruptionKind::Gaussian { sigma: a.sigma },
        KindArg::Uniform => CorruptionKind::Uniform { amplitude: a.amplitude },
        KindArg::Impulse => CorruptionKind::Impulse {
            rate: a.rate,
            magnitude: a.magnitude,
        },
        KindArg::Dropout => CorruptionKind::FeatureDropout { p: a.p },
        KindArg::Scale => CorruptionKind::Scale { factor: a.factor },
        KindArg::Smooth => CorruptionKind::Smooth { window: a.window },
    };
    let spec = CorruptionSpec { kind, seed: a.seed };
    let data = read_dataset(&a.data)?;
    let out = corrupt(&data, &spec)?;
    save_csv(&out, &a.out)?;
    run.finish(json!({ "corruption": spec }), Some(a.seed), &[&a.out])?;
    Ok(format!("corrupted {} rows -> {}\n", out.len(), a.out.display()))
}

pub fn cmd_shift_test(a: &ShiftArgs) -> CliResult<String> {
    let run = Run::new("shift-test", &[&a.clean, &a.suspect, &a.model]);
    let norm = parse_norm(&a.norm)?;
    if !(a.p_threshold > 0.0 && a.p_threshold < 1.0) {
        return Err(CliError::Config(format!("--p-threshold must lie in (0, 1), got {}", a.p_threshold)));
    }
    let checkpoint = Checkpoint::load(&a.model)?;
    let clean = scaled_for(&checkpoint, &read_dataset(&a.clean)?)?;
    let suspect = scaled_for(&checkpoint, &read_dataset(&a.suspect)?)?;
    let sc = score(&checkpoint.net, &clean, norm)?.scores;
    let ss = score(&checkpoint.net, &suspect, norm)?.scores;
    let r = MetricsReport::from_groups(&sc, &ss)?;
    let shifted = r.p_value < a.p_threshold;
    let mut text = format!(
        "verdict: {}\np_threshold: {}\n",
        if shifted { "shifted" } else { "no-shift-detected" },
        a.p_threshold
    );
    text.push_str(&r.to_text());
    let out = a.out.clone().unwrap_or_else(|| with_suffix(&a.suspect, ".shift.txt"));
    write_text(&out, &text)?;
    run.finish(json!({ "norm": norm, "p_threshold": a.p_threshold }), None, &[&out])?;
    Ok(text)
}

pub fn run(cli: &Cli) -> CliResult<String> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Prepare(a) => cmd_prepare(a),
        Command::Train(a) => cmd_train(a),
        Command::Score(a) => cmd_score(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Baseline(a) => cmd_baseline(a),
        Command::Corrupt(a) => cmd_corrupt(a),
        Command::ShiftTest(a) => cmd_shift_test(a),
    }
}

/// Parses `args`, runs the command, prints its report and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(text) => {
            let mut stdout = std::io::stdout().lock();
            let _ = stdout.write_all(text.as_bytes());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

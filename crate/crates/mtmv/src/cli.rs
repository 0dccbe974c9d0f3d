//! Command-line surface: train, eval, gen-synth, gates, dtw, ablate.
//!
//! Exit codes: 0 success, 2 usage/config error (including unknown flags and
//! config keys), 3 artifact error (missing/mismatched checkpoint or dataset),
//! 1 runtime failure. Every command is deterministic given its flags and
//! seed. Option precedence: CLI flag > config file > built-in default.

use crate::analysis::{
    ablation_csv, channel_mean_series, dtw_distance, run_ablation, z_normalize, AblationAxis,
    AblationGrid,
};
use crate::checkpoint::{self, Checkpoint};
use crate::config::{ConfigError, ExperimentConfig};
use crate::data::{generate_synthetic, load_dataset, DataError, Dataset, Split, SyntheticSpec};
use crate::model::SharedBlockNet;
use crate::trainer::{evaluate, fit, TrainError};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config keys, or values — exit 2.
    Usage(String),
    /// Checkpoints or datasets that fail to load or don't match — exit 3.
    Artifact(String),
    /// Failures while running — exit 1.
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Artifact(_) => 3,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Artifact(m) | CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

/// Training failures: data feasibility problems are artifact errors, the
/// rest are runtime.
fn train_err(e: TrainError) -> CliError {
    match &e {
        TrainError::EmptySplit { .. } | TrainError::Data(_) | TrainError::Sampler(_) => {
            CliError::Artifact(e.to_string())
        }
        _ => CliError::Runtime(e.to_string()),
    }
}

#[derive(Parser)]
#[command(
    name = "mtmv",
    version,
    about = "Semi-supervised multi-task multi-view learning over windowed sensor series"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Train a model and write logs + checkpoints to a run directory
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split (per-task rows plus a mean row)
    Eval(EvalArgs),
    /// Generate a synthetic dataset with planted view groups
    GenSynth(GenSynthArgs),
    /// Print a checkpoint's block-assignment gate matrix as CSV
    Gates(GatesArgs),
    /// Dynamic-time-warping distance between two series CSV files
    Dtw(DtwArgs),
    /// Train a grid of models and write mean/std test metrics as CSV
    Ablate(AblateArgs),
}

/// Flags mirroring the config-file keys one-to-one. Any flag given here
/// overrides the same key from --config.
#[derive(Args, Clone)]
pub struct OverrideArgs {
    /// Dataset manifest path (key: data)
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Encoder/block width (key: hidden_dim) [default: 64]
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    /// Shared block count (key: n_blocks) [default: 4]
    #[arg(long)]
    pub n_blocks: Option<usize>,
    /// Layers per block (key: block_depth) [default: 2]
    #[arg(long)]
    pub block_depth: Option<usize>,
    /// Dropout rate in [0,1) (key: dropout) [default: 0.5]
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Gating granularity, task_view or view (key: unit_mode) [default: task_view]
    #[arg(long)]
    pub unit_mode: Option<String>,
    /// Consistency-adaption weight (key: lambda) [default: 1]
    #[arg(long)]
    pub lambda: Option<f64>,
    /// View-fusion regularizer weight (key: mu) [default: 0.1]
    #[arg(long)]
    pub mu: Option<f64>,
    /// Internal draws per consistency sample (key: k_internal) [default: 3]
    #[arg(long)]
    pub k_internal: Option<usize>,
    /// External divergence cap (key: margin) [default: 2]
    #[arg(long)]
    pub margin: Option<f64>,
    /// Labeled minibatch size (key: labeled_batch) [default: 16]
    #[arg(long)]
    pub labeled_batch: Option<usize>,
    /// Consistency samples per step per task (key: unlabeled_batch) [default: 24]
    #[arg(long)]
    pub unlabeled_batch: Option<usize>,
    /// Evaluation chunk size (key: eval_batch) [default: 32]
    #[arg(long)]
    pub eval_batch: Option<usize>,
    /// Adam learning rate (key: lr) [default: 0.0003]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Adam beta1 (key: beta1) [default: 0.9]
    #[arg(long)]
    pub beta1: Option<f64>,
    /// Adam beta2 (key: beta2) [default: 0.999]
    #[arg(long)]
    pub beta2: Option<f64>,
    /// Adam epsilon (key: eps) [default: 1e-8]
    #[arg(long)]
    pub eps: Option<f64>,
    /// Decoupled weight decay (key: weight_decay) [default: 1e-6]
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Initial gate temperature (key: tau0) [default: 5]
    #[arg(long)]
    pub tau0: Option<f64>,
    /// Final gate temperature (key: tau_min) [default: 0.5]
    #[arg(long)]
    pub tau_min: Option<f64>,
    /// Optimizer steps (key: max_steps) [default: 1000]
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Steps between validations (key: eval_interval) [default: 100]
    #[arg(long)]
    pub eval_interval: Option<u64>,
    /// Non-improving evaluations before stopping (key: patience) [default: 5]
    #[arg(long)]
    pub patience: Option<usize>,
    /// Run seed (key: seed) [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Windows per consistency fragment (key: fragment_len) [default: 24]
    #[arg(long)]
    pub fragment_len: Option<usize>,
    /// Unlabeled:labeled subsample ratio or "none" (key: unlabeled_ratio) [default: none]
    #[arg(long)]
    pub unlabeled_ratio: Option<String>,
}

impl OverrideArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) -> Result<(), CliError> {
        if let Some(v) = &self.data {
            cfg.data = Some(v.clone());
        }
        if let Some(v) = self.hidden_dim {
            cfg.model.hidden_dim = v;
        }
        if let Some(v) = self.n_blocks {
            cfg.model.n_blocks = v;
        }
        if let Some(v) = self.block_depth {
            cfg.model.block_depth = v;
        }
        if let Some(v) = self.dropout {
            cfg.model.dropout = v;
        }
        if let Some(v) = &self.unit_mode {
            cfg.apply("unit_mode", v)?;
        }
        if let Some(v) = self.lambda {
            cfg.train.lambda = v;
        }
        if let Some(v) = self.mu {
            cfg.train.mu = v;
        }
        if let Some(v) = self.k_internal {
            cfg.train.k_internal = v;
        }
        if let Some(v) = self.margin {
            cfg.train.margin = v;
        }
        if let Some(v) = self.labeled_batch {
            cfg.train.labeled_batch = v;
        }
        if let Some(v) = self.unlabeled_batch {
            cfg.train.unlabeled_batch = v;
        }
        if let Some(v) = self.eval_batch {
            cfg.train.eval_batch = v;
        }
        if let Some(v) = self.lr {
            cfg.train.adam.lr = v;
        }
        if let Some(v) = self.beta1 {
            cfg.train.adam.beta1 = v;
        }
        if let Some(v) = self.beta2 {
            cfg.train.adam.beta2 = v;
        }
        if let Some(v) = self.eps {
            cfg.train.adam.eps = v;
        }
        if let Some(v) = self.weight_decay {
            cfg.train.adam.weight_decay = v;
        }
        if let Some(v) = self.tau0 {
            cfg.train.tau0 = v;
        }
        if let Some(v) = self.tau_min {
            cfg.train.tau_min = v;
        }
        if let Some(v) = self.max_steps {
            cfg.train.max_steps = v;
        }
        if let Some(v) = self.eval_interval {
            cfg.train.eval_interval = v;
        }
        if let Some(v) = self.patience {
            cfg.train.patience = v;
        }
        if let Some(v) = self.seed {
            cfg.train.seed = v;
        }
        if let Some(v) = self.fragment_len {
            cfg.train.fragment_len = v;
        }
        if let Some(v) = &self.unlabeled_ratio {
            cfg.apply("unlabeled_ratio", v)?;
        }
        Ok(())
    }
}

#[derive(Args)]
pub struct TrainArgs {
    /// Flat key=value config file; CLI flags override its entries
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory for config.snapshot, logs, and checkpoints
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: OverrideArgs,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum EvalSplit {
    Val,
    Test,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Checkpoint file to score
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset manifest path
    #[arg(long)]
    pub data: PathBuf,
    /// Split to score
    #[arg(long, value_enum, default_value_t = EvalSplit::Val)]
    pub split: EvalSplit,
    /// Evaluation chunk size [default: 32]
    #[arg(long, default_value_t = 32)]
    pub eval_batch: usize,
}

#[derive(Args)]
pub struct GenSynthArgs {
    /// Output directory for manifest.json and per-(task,view) CSVs
    #[arg(long)]
    pub out: PathBuf,
    /// Generator seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Task count
    #[arg(long, default_value_t = 4)]
    pub tasks: usize,
    /// View count
    #[arg(long, default_value_t = 6)]
    pub views: usize,
    /// Planted view-group count
    #[arg(long, default_value_t = 3)]
    pub groups: usize,
    /// Classes per task
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    /// Same-label segments per class [default: 2]
    #[arg(long)]
    pub segments: Option<usize>,
    /// Windows per segment; multiples of 10 give an exact 1:4 labeled:unlabeled split [default: 30]
    #[arg(long)]
    pub segment_windows: Option<usize>,
    /// Channels per view [default: 3]
    #[arg(long)]
    pub channels: Option<usize>,
    /// Rows per window [default: 32]
    #[arg(long)]
    pub window_rows: Option<usize>,
    /// Additive noise scale [default: 2.5]
    #[arg(long)]
    pub noise_scale: Option<f64>,
    /// Latent phase drift per window in radians [default: 0.05]
    #[arg(long)]
    pub phase_drift: Option<f64>,
}

#[derive(Args)]
pub struct GatesArgs {
    /// Checkpoint whose gate matrix to print
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Args)]
pub struct DtwArgs {
    /// First series CSV
    pub a: PathBuf,
    /// Second series CSV
    pub b: PathBuf,
    /// Skip per-series z-normalization of the channel-mean series
    #[arg(long, default_value_t = false)]
    pub raw: bool,
}

#[derive(Args)]
pub struct AblateArgs {
    /// Flat key=value config file; CLI flags override its entries
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Grid axis
    #[arg(long, value_parser = parse_axis)]
    pub axis: AblationAxis,
    /// Comma-separated grid values (blocks: integers; ratio/gca: numbers)
    #[arg(long)]
    pub values: String,
    /// Seeds per grid point, numbered seed..seed+N-1
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    /// Output CSV path
    #[arg(long, default_value = "ablation.csv")]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: OverrideArgs,
}

fn parse_axis(s: &str) -> Result<AblationAxis, String> {
    AblationAxis::parse(s).ok_or_else(|| format!("unknown axis `{s}` (blocks, ratio, gca)"))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::GenSynth(a) => cmd_gen_synth(a),
        Command::Gates(a) => cmd_gates(a),
        Command::Dtw(a) => cmd_dtw(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}

/// Defaults, then the config file, then CLI flags.
fn merged_config(
    config: Option<&Path>,
    overrides: &OverrideArgs,
) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = config {
        cfg.apply_file(path)?;
    }
    overrides.apply(&mut cfg)?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(cfg: &ExperimentConfig) -> Result<Dataset, CliError> {
    let path = cfg.data.clone().ok_or_else(|| {
        CliError::Usage("no dataset given: pass --data or set data= in the config file".into())
    })?;
    load_dataset(&path).map_err(|e| CliError::Artifact(e.to_string()))
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let cfg = merged_config(args.config.as_deref(), &args.overrides)?;
    let dataset = load_data(&cfg)?;
    let model = cfg.model_config(&dataset);
    let net = SharedBlockNet::build(model, cfg.train.seed);
    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", args.out.display())))?;
    let snap_path = args.out.join("config.snapshot");
    std::fs::write(&snap_path, cfg.snapshot())
        .map_err(|e| CliError::Runtime(format!("{}: {e}", snap_path.display())))?;
    let record = fit(&net, &dataset, &cfg.train, Some(&args.out)).map_err(train_err)?;
    println!(
        "trained {} steps ({}); best step {} with mean val macro-F1 {:.6}; run dir {}",
        record.steps_run,
        if record.stopped_early { "stopped early" } else { "full budget" },
        record.best_step,
        record.best_val_macro_f1,
        args.out.display()
    );
    Ok(())
}

fn load_net(path: &Path) -> Result<(Checkpoint, SharedBlockNet), CliError> {
    let ck = checkpoint::load(path).map_err(|e| CliError::Artifact(format!("{}: {e}", path.display())))?;
    let net = SharedBlockNet::build(ck.model.clone(), 0);
    ck.restore_params(&net.params())
        .map_err(|e| CliError::Artifact(format!("{}: {e}", path.display())))?;
    Ok((ck, net))
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let (_, net) = load_net(&args.checkpoint)?;
    let dataset = load_dataset(&args.data).map_err(|e| CliError::Artifact(e.to_string()))?;
    if net.cfg.view_dims != dataset.view_dims() || net.cfg.n_classes != dataset.n_classes() {
        return Err(CliError::Artifact(format!(
            "checkpoint/dataset mismatch: model expects views {:?} classes {:?}, dataset has {:?}/{:?}",
            net.cfg.view_dims,
            net.cfg.n_classes,
            dataset.view_dims(),
            dataset.n_classes()
        )));
    }
    let split = match args.split {
        EvalSplit::Val => Split::Val,
        EvalSplit::Test => Split::Test,
    };
    let per_task = evaluate(&net, &dataset, split, args.eval_batch).map_err(train_err)?;
    println!("task,acc,macro_f1,weighted_f1");
    for (task, m) in dataset.tasks.iter().zip(&per_task) {
        println!("{},{},{},{}", task.data.name, m.acc, m.macro_f1, m.weighted_f1);
    }
    let n = per_task.len() as f64;
    println!(
        "mean,{},{},{}",
        per_task.iter().map(|m| m.acc).sum::<f64>() / n,
        per_task.iter().map(|m| m.macro_f1).sum::<f64>() / n,
        per_task.iter().map(|m| m.weighted_f1).sum::<f64>() / n
    );
    Ok(())
}

fn cmd_gen_synth(args: GenSynthArgs) -> Result<(), CliError> {
    let mut spec = SyntheticSpec::new(args.tasks, args.views, args.groups, args.classes, args.seed);
    if let Some(v) = args.segments {
        spec.segments_per_class = v;
    }
    if let Some(v) = args.segment_windows {
        spec.segment_windows = v;
    }
    if let Some(v) = args.channels {
        spec.channels = v;
    }
    if let Some(v) = args.window_rows {
        spec.window_rows = v;
    }
    if let Some(v) = args.noise_scale {
        spec.noise_scale = v;
    }
    if let Some(v) = args.phase_drift {
        spec.phase_drift = v;
    }
    let manifest = generate_synthetic(&spec, &args.out).map_err(|e| match e {
        DataError::BadSpec(_) => CliError::Usage(e.to_string()),
        other => CliError::Runtime(other.to_string()),
    })?;
    println!("{}", manifest.display());
    Ok(())
}

fn cmd_gates(args: GatesArgs) -> Result<(), CliError> {
    let (_, net) = load_net(&args.checkpoint)?;
    print!("{}", net.gate.export_gate_matrix());
    Ok(())
}

/// Reads any of our series CSVs: `ts_ms` first, channels between, `label`
/// last when present. Returns the channel matrix row-major.
fn read_dtw_series(path: &Path) -> Result<(Vec<f64>, usize), CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Artifact(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| CliError::Artifact(format!("{}: empty file", path.display())))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 2 {
        return Err(CliError::Artifact(format!("{}: need at least two columns", path.display())));
    }
    let skip_first = cols[0] == "ts_ms";
    let skip_last = *cols.last().unwrap() == "label";
    let lo = usize::from(skip_first);
    let hi = cols.len() - usize::from(skip_last);
    if lo >= hi {
        return Err(CliError::Artifact(format!("{}: no channel columns", path.display())));
    }
    let mut data = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(CliError::Artifact(format!(
                "{}:{}: expected {} fields, got {}",
                path.display(),
                i + 1,
                cols.len(),
                fields.len()
            )));
        }
        for f in &fields[lo..hi] {
            data.push(f.parse::<f64>().map_err(|e| {
                CliError::Artifact(format!("{}:{}: bad number `{f}`: {e}", path.display(), i + 1))
            })?);
        }
    }
    Ok((data, hi - lo))
}

fn cmd_dtw(args: DtwArgs) -> Result<(), CliError> {
    let prep = |path: &Path| -> Result<Vec<f64>, CliError> {
        let (data, channels) = read_dtw_series(path)?;
        let series = channel_mean_series(&data, channels);
        Ok(if args.raw { series } else { z_normalize(&series) })
    };
    let a = prep(&args.a)?;
    let b = prep(&args.b)?;
    println!("{}", dtw_distance(&a, &b));
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<(), CliError> {
    let cfg = merged_config(args.config.as_deref(), &args.overrides)?;
    let dataset = load_data(&cfg)?;
    let model = cfg.model_config(&dataset);
    let values: Vec<f64> = args
        .values
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|e| CliError::Usage(format!("bad grid value `{v}`: {e}")))
        })
        .collect::<Result<_, _>>()?;
    if values.is_empty() {
        return Err(CliError::Usage("no grid values given".into()));
    }
    if args.seeds == 0 {
        return Err(CliError::Usage("need at least one seed".into()));
    }
    let seeds: Vec<u64> = (0..args.seeds).map(|i| cfg.train.seed + i).collect();
    let grid = AblationGrid { axis: args.axis, values, seeds };
    let rows = run_ablation(&dataset, &model, &cfg.train, &grid).map_err(|e| match &e {
        TrainError::Data(DataError::BadSpec(_)) => CliError::Usage(e.to_string()),
        _ => train_err(e),
    })?;
    let csv = ablation_csv(&rows);
    std::fs::write(&args.out, &csv)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", args.out.display())))?;
    print!("{csv}");
    Ok(())
}

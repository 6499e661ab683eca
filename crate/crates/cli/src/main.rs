//! `plpcl` command-line driver.
//!
//! Exit codes: 0 on success, 1 on runtime or data errors, 2 on usage errors.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use plpcl::data::{self, EmbeddingDataset, Setting, Split, SplitSpec, SynthSpec};
use plpcl::eval::{self, LabelingPair, NmiNorm};
use plpcl::losses::LossWeights;
use plpcl::model::{Checkpoint, SeedLineage};
use plpcl::pipeline::{self, EpochLog, TrainConfig, TrainState};
use plpcl::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Parser)]
#[command(
    name = "plpcl",
    version,
    about = "Intent discovery over precomputed embeddings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic Gaussian-mixture dataset.
    Synth(SynthArgs),
    /// Stage 1: supervised pretraining on labeled known-class samples.
    Pretrain(PretrainArgs),
    /// Stage 2: semi-supervised training from a pretrained checkpoint.
    Train(TrainArgs),
    /// Cluster the test split and report ACC, ARI and NMI.
    Eval(EvalArgs),
    /// Estimate the number of clusters from instance features.
    EstimateK(EstimateArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    classes: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    dim: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    per_class: u64,
    #[arg(long, value_parser = positive)]
    separation: f64,
    #[arg(long, value_parser = positive)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SettingArg {
    Ood,
    Open,
}

impl From<SettingArg> for Setting {
    fn from(s: SettingArg) -> Self {
        match s {
            SettingArg::Ood => Setting::Ood,
            SettingArg::Open => Setting::Open,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Dev,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Dev => Split::Dev,
            SplitArg::Test => Split::Test,
        }
    }
}

/// Dataset input plus the optional known/novel split applied on load.
#[derive(Args)]
struct DataArgs {
    /// JSONL dataset.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "open")]
    setting: SettingArg,
    /// Hide this fraction of classes as novel. Without it the dataset is
    /// used as is: classes labeled in train are known, the rest novel.
    #[arg(long, value_parser = fraction)]
    ood_ratio: Option<f64>,
    /// Fraction of known-class training samples that keep their label.
    #[arg(long, value_parser = fraction, default_value_t = 1.0)]
    labeled_ratio: f64,
    /// Seed of the split; defaults to `--seed`.
    #[arg(long)]
    split_seed: Option<u64>,
}

#[derive(Args)]
struct StageArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_parser = fraction, default_value_t = plpcl::DEFAULT_SIGMA)]
    sigma: f64,
    #[arg(long, value_parser = positive, default_value_t = plpcl::losses::DEFAULT_TAU)]
    tau: f64,
    /// Epochs of this stage.
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..), default_value_t = 128)]
    batch: u64,
    /// Learning rate of this stage; defaults to 5e-5 for pretrain, 3e-4 for train.
    #[arg(long, value_parser = positive)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Loss weights such as `scl=1,ce=1,ilcl=1,clcl=1,pcl=0`; omitted terms keep 1.
    #[arg(long, value_parser = weights, default_value = "")]
    weights: LossWeights,
    #[arg(long, value_parser = dropout, default_value_t = plpcl::model::DEFAULT_DROPOUT)]
    dropout: f64,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch JSON lines; defaults to `<out>.log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    stage: StageArgs,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..), default_value_t = 256)]
    hidden: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..), default_value_t = plpcl::model::DEFAULT_FEATURE_DIM as u64)]
    feature_dim: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    stage: StageArgs,
    /// Pretrained checkpoint to start from.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Metrics JSON; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Confusion CSV; defaults to `<out>.confusion.csv` when `--out` is set.
    #[arg(long)]
    confusion: Option<PathBuf>,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Over-clustering size; defaults to twice the checkpoint's cluster columns.
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    k_cap: Option<u64>,
    #[arg(long, value_parser = open_fraction, default_value_t = eval::DEFAULT_RHO)]
    rho: f64,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Result JSON; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn positive(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("expected a positive number, got {s:?}")),
    }
}

fn fraction(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if (0.0..=1.0).contains(&v) => Ok(v),
        _ => Err(format!("expected a number in [0, 1], got {s:?}")),
    }
}

fn open_fraction(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v < 1.0 => Ok(v),
        _ => Err(format!("expected a number in (0, 1), got {s:?}")),
    }
}

fn dropout(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if (0.0..1.0).contains(&v) => Ok(v),
        _ => Err(format!("expected a number in [0, 1), got {s:?}")),
    }
}

fn weights(s: &str) -> std::result::Result<LossWeights, String> {
    LossWeights::parse(s).map_err(|e| e.to_string())
}

/// Provenance written next to every output file.
#[derive(Serialize)]
struct Manifest<'a, C: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    seed: u64,
    config: C,
    split: Option<SplitSpec>,
    inputs: Vec<InputDigest>,
    outputs: Vec<&'a Path>,
}

#[derive(Serialize)]
struct InputDigest {
    path: PathBuf,
    sha256: String,
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn digest(path: &Path) -> Result<InputDigest> {
    let bytes = fs::read(path).map_err(|e| io_error(path, e))?;
    Ok(InputDigest {
        path: path.to_path_buf(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_error(path, e))
}

/// `run.json` becomes `run.<suffix>`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    path.with_extension(suffix)
}

fn write_manifest<C: Serialize>(out: &Path, manifest: &Manifest<C>) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes") + "\n";
    write_file(&sibling(out, "manifest.json"), &text)
}

impl DataArgs {
    fn split_spec(&self, seed: u64) -> Option<SplitSpec> {
        self.ood_ratio.map(|ratio| SplitSpec {
            ood_class_ratio: ratio,
            labeled_ratio: self.labeled_ratio,
            setting: self.setting.into(),
            seed: self.split_seed.unwrap_or(seed),
        })
    }

    fn load(&self, seed: u64) -> Result<(EmbeddingDataset, Option<SplitSpec>)> {
        let raw = data::load_dataset(&self.data)?;
        let spec = self.split_spec(seed);
        let data = match &spec {
            Some(spec) => data::apply_split(&raw, spec)?,
            None => raw,
        };
        Ok((data, spec))
    }
}

fn synth(args: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        classes: args.classes as usize,
        dim: args.dim as usize,
        per_class: args.per_class as usize,
        separation: args.separation,
        noise: args.noise,
        seed: args.seed,
    };
    let data = data::synth_mixture(&spec)?;
    data::save_dataset(&data, &args.out)?;
    write_manifest(
        &args.out,
        &Manifest {
            tool: "plpcl",
            version: env!("CARGO_PKG_VERSION"),
            command: "synth",
            seed: args.seed,
            config: spec,
            split: None,
            inputs: Vec::new(),
            outputs: vec![&args.out],
        },
    )
}

fn stage_config(args: &StageArgs, data: &EmbeddingDataset) -> Result<TrainConfig> {
    let setting: Setting = args.data.setting.into();
    if data.classes().k_ood() == 0 {
        return Err(Error::NoClasses(
            "the dataset has no novel classes; hide some with --ood-ratio".into(),
        ));
    }
    let mut cfg = TrainConfig::for_layout(setting, data.classes());
    cfg.sigma = args.sigma;
    cfg.tau = args.tau;
    cfg.batch_size = args.batch as usize;
    cfg.seed = args.seed;
    cfg.weights = args.weights;
    cfg.dropout_p = args.dropout;
    Ok(cfg)
}

/// What a training stage records besides its parameters.
struct StageRecord<'a> {
    command: &'static str,
    extra_inputs: &'a [&'a Path],
    cfg: &'a TrainConfig,
    split: Option<SplitSpec>,
    lineage: Vec<SeedLineage>,
}

/// Runs one stage, streaming the epoch log, then writes checkpoint and manifest.
fn run_stage(
    args: &StageArgs,
    record: StageRecord,
    data: &EmbeddingDataset,
    stage: impl FnOnce(&mut dyn FnMut(&EpochLog)) -> Result<plpcl::model::ModelParams>,
) -> Result<()> {
    let log_path = args
        .log
        .clone()
        .unwrap_or_else(|| sibling(&args.out, "log.jsonl"));
    let file = File::create(&log_path).map_err(|e| io_error(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let mut failure = None;
    let params = stage(&mut |entry| {
        if failure.is_none() {
            let line = serde_json::to_string(entry).expect("log entry serializes");
            if let Err(e) = writeln!(log, "{line}") {
                failure = Some(e);
            }
        }
    })?;
    if let Some(e) = failure {
        return Err(io_error(&log_path, e));
    }
    log.flush().map_err(|e| io_error(&log_path, e))?;

    let checkpoint = Checkpoint {
        params,
        lineage: record.lineage,
        classes: data.classes().clone(),
    };
    checkpoint.save(&args.out)?;

    let mut inputs = vec![digest(&args.data.data)?];
    for p in record.extra_inputs {
        inputs.push(digest(p)?);
    }
    write_manifest(
        &args.out,
        &Manifest {
            tool: "plpcl",
            version: env!("CARGO_PKG_VERSION"),
            command: record.command,
            seed: args.seed,
            config: record.cfg,
            split: record.split,
            inputs,
            outputs: vec![&args.out, &log_path],
        },
    )
}

fn pretrain(args: &PretrainArgs) -> Result<()> {
    let stage = &args.stage;
    let (data, split) = stage.data.load(stage.seed)?;
    let mut cfg = stage_config(stage, &data)?;
    cfg.hidden = args.hidden as usize;
    cfg.feature_dim = args.feature_dim as usize;
    cfg.epochs_pretrain = stage.epochs;
    if let Some(lr) = stage.lr {
        cfg.pretrain_lr = lr;
    }
    let lineage = vec![SeedLineage {
        stage: "pretrain".into(),
        seed: stage.seed,
        epochs: stage.epochs,
    }];
    let record = StageRecord {
        command: "pretrain",
        extra_inputs: &[],
        cfg: &cfg,
        split,
        lineage,
    };
    run_stage(stage, record, &data, |log| {
        pipeline::pretrain_with(&data, &cfg, log)
    })
}

fn train(args: &TrainArgs) -> Result<()> {
    let stage = &args.stage;
    let (data, split) = stage.data.load(stage.seed)?;
    let start = Checkpoint::load(&args.checkpoint)?;
    let mut cfg = stage_config(stage, &data)?;
    cfg.hidden = start.params.dims.hidden;
    cfg.feature_dim = start.params.dims.feature;
    cfg.head_hidden = start.params.dims.head_hidden.clone();
    cfg.epochs_train = stage.epochs;
    if let Some(lr) = stage.lr {
        cfg.train_lr = lr;
    }
    let mut lineage = start.lineage.clone();
    lineage.push(SeedLineage {
        stage: "train".into(),
        seed: stage.seed,
        epochs: stage.epochs,
    });
    let state = TrainState::new(start.params, cfg.train_lr);
    let record = StageRecord {
        command: "train",
        extra_inputs: &[&args.checkpoint],
        cfg: &cfg,
        split,
        lineage,
    };
    run_stage(stage, record, &data, |log| {
        pipeline::train_from(&data, state, &cfg, log).map(|s| s.params)
    })
}

/// Labeled records of `split` that the setting evaluates on.
fn eval_rows(
    data: &EmbeddingDataset,
    checkpoint: &Checkpoint,
    setting: Setting,
    split: Split,
) -> Vec<usize> {
    data.indices(split)
        .into_iter()
        .filter(|&i| match (&data.records()[i].label, setting) {
            (None, _) => false,
            (Some(_), Setting::Open) => true,
            (Some(l), Setting::Ood) => checkpoint.classes.unknown.contains(l),
        })
        .collect()
}

#[derive(Serialize)]
struct EvalConfig {
    setting: Setting,
    checkpoint: PathBuf,
    nmi: &'static str,
}

fn evaluate(args: &EvalArgs) -> Result<()> {
    let (data, split) = args.data.load(args.seed)?;
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let setting: Setting = args.data.setting.into();
    let rows = eval_rows(&data, &checkpoint, setting, Split::Test);
    let layout = &checkpoint.classes;
    let truth = rows
        .iter()
        .map(|&i| {
            data::layout_column(
                layout,
                data.records()[i].label.as_deref().expect("filtered"),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let z = data.matrix(&rows)?;
    let pred = pipeline::predict(&checkpoint.params, &z, setting, layout.k_ind())?;
    let report = eval::evaluate(&LabelingPair::new(pred, truth)?, NmiNorm::Geometric)?;
    let json = serde_json::to_string(&report).expect("metrics serialize");
    let names: Vec<String> = layout
        .known
        .iter()
        .chain(&layout.unknown)
        .cloned()
        .collect();
    let csv = report
        .confusion
        .as_ref()
        .map(|t| t.to_csv(Some(&names)))
        .unwrap_or_default();

    let Some(out) = &args.out else {
        println!("{json}");
        if let Some(path) = &args.confusion {
            write_file(path, &csv)?;
        }
        return Ok(());
    };
    let confusion = args
        .confusion
        .clone()
        .unwrap_or_else(|| sibling(out, "confusion.csv"));
    write_file(out, &(json + "\n"))?;
    write_file(&confusion, &csv)?;
    write_manifest(
        out,
        &Manifest {
            tool: "plpcl",
            version: env!("CARGO_PKG_VERSION"),
            command: "eval",
            seed: args.seed,
            config: EvalConfig {
                setting,
                checkpoint: args.checkpoint.clone(),
                nmi: "geometric",
            },
            split,
            inputs: vec![digest(&args.data.data)?, digest(&args.checkpoint)?],
            outputs: vec![out, &confusion],
        },
    )
}

#[derive(Serialize)]
struct EstimateConfig {
    k_cap: usize,
    rho: f64,
    split: Split,
    checkpoint: PathBuf,
}

fn estimate_k(args: &EstimateArgs) -> Result<()> {
    let (data, split) = args.data.load(args.seed)?;
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let which: Split = args.split.into();
    let rows = data.indices(which);
    let f = pipeline::features(&checkpoint.params, &data.matrix(&rows)?)?;
    let k_cap = args
        .k_cap
        .map(|k| k as usize)
        .unwrap_or(2 * checkpoint.params.dims.clusters);
    let k_pred = eval::estimate_k(&f, k_cap, args.rho, args.seed)?;
    let json = serde_json::json!({ "k_pred": k_pred }).to_string();

    let Some(out) = &args.out else {
        println!("{json}");
        return Ok(());
    };
    write_file(out, &(json + "\n"))?;
    write_manifest(
        out,
        &Manifest {
            tool: "plpcl",
            version: env!("CARGO_PKG_VERSION"),
            command: "estimate-k",
            seed: args.seed,
            config: EstimateConfig {
                k_cap,
                rho: args.rho,
                split: which,
                checkpoint: args.checkpoint.clone(),
            },
            split,
            inputs: vec![digest(&args.data.data)?, digest(&args.checkpoint)?],
            outputs: vec![out],
        },
    )
}

/// Sizes the global thread pool from `PLPCL_THREADS`; unset means one per core.
fn configure_threads() -> std::result::Result<(), String> {
    let Ok(value) = std::env::var("PLPCL_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| format!("PLPCL_THREADS must be a positive integer, got {value:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(message) = configure_threads() {
        eprintln!("error: {message}");
        return ExitCode::from(2);
    }
    let result = match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => evaluate(a),
        Command::EstimateK(a) => estimate_k(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

//! Command-line front end. Each subcommand takes an experiment file or a
//! named preset and echoes the effective configuration next to its
//! artifacts, so a run can be repeated from its outputs alone.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::autodiff::argmax;
use crate::clustering::{cluster_stats, kmeans, knn_top1_f1, rand_index, Partition};
use crate::data::{generate_synthetic, Dataset};
use crate::diagnostics::{check_objective_gradients, GradCheckConfig};
use crate::error::{Error, Result};
use crate::model::{CheckpointFile, ModelParams};
use crate::train::{ablation_to_csv, metrics_to_csv, run_ablation, run_epoch, RunData, Split, TrainConfig, TrainState};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const CONFIG_ECHO_FILE: &str = "config.json";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const EVAL_HEADER: &str =
    "samples,dim,assigner_rand_index,kmeans_k,kmeans_rand_index,knn_f1,clusters,max_share";

const KMEANS_MAX_ITERS: usize = 300;

#[derive(Debug, Parser)]
#[command(name = "clusiam", version, about = "Cluster-constrained Siamese self-supervised training on synthetic data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (CSV when the output ends in .csv, binary otherwise).
    GenData(RunArgs),
    /// Train one variant and write metrics, a checkpoint and the effective config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset file.
    Eval(EvalArgs),
    /// Finite-difference check of every parameter gradient of the full objective.
    Gradcheck(GradcheckArgs),
    /// Train all four variants on identical data and write a comparison table.
    Ablation(RunArgs),
    /// Print the effective experiment file (after --preset/--seed/--out) as JSON.
    PrintConfig(RunArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Experiment file (JSON).
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in experiment: smoke, desk or paperlike.
    #[arg(long)]
    pub preset: Option<String>,
    /// Output path; overrides the experiment file's outputs.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Continue from a checkpoint written by an earlier `train`.
    #[arg(long, conflicts_with_all = ["config", "preset", "seed"])]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Report file (one CSV row).
    #[arg(long)]
    pub out: PathBuf,
    /// Seed of the 75/25 split and of K-Means.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    /// Built-in check: tiny.
    #[arg(long, default_value = "tiny", conflicts_with = "config")]
    pub preset: String,
    /// Gradient-check config (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Leave the projections attached in the analytic graph; the check should then fail.
    #[arg(long)]
    pub drop_stop_gradient: bool,
}

/// Where a command writes its artifacts when no `--out` is given.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputPaths {
    /// Dataset file written by `gen-data`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    /// Directory for `train` and `ablation` artifacts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

/// The JSON document read by `--config`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    pub train: TrainConfig,
    #[serde(default)]
    pub outputs: OutputPaths,
}

impl ExperimentFile {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::format("experiment file", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Format { what, detail } => Error::Format {
                what,
                detail: format!("{}: {detail}", path.display()),
            },
            other => other,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    fn from_args(args: &RunArgs) -> Result<Self> {
        let mut exp = match (&args.config, &args.preset) {
            (Some(path), _) => Self::load(path)?,
            (None, Some(name)) => Self {
                train: TrainConfig::preset(name)?,
                outputs: OutputPaths::default(),
            },
            (None, None) => return Err(Error::Param("pass --config or --preset".into())),
        };
        if let Some(seed) = args.seed {
            exp.train = exp.train.with_seed(seed);
        }
        Ok(exp)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// `<file>.config.json` beside a single-file output.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".config.json");
    path.with_file_name(name)
}

fn out_dir(args: &RunArgs, exp: &mut ExperimentFile) -> Result<PathBuf> {
    if let Some(dir) = &args.out {
        exp.outputs.dir = Some(dir.clone());
    }
    let dir = exp
        .outputs
        .dir
        .clone()
        .ok_or_else(|| Error::Param("no output directory: pass --out or set outputs.dir".into()))?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

/// Writes the dataset described by the experiment's `train.data`.
pub fn cmd_gen_data(args: &RunArgs, log: &mut dyn Write) -> Result<()> {
    let mut exp = ExperimentFile::from_args(args)?;
    if let Some(out) = &args.out {
        exp.outputs.dataset = Some(out.clone());
    }
    let out = exp
        .outputs
        .dataset
        .clone()
        .ok_or_else(|| Error::Param("no dataset path: pass --out or set outputs.dataset".into()))?;
    let ds = generate_synthetic(&exp.train.data)?;
    ds.save(&out)?;
    write_file(&sidecar_path(&out), exp.to_json()?.as_bytes())?;
    writeln!(log, "wrote {}: N={} D={} clusters={}", out.display(), ds.len(), ds.dim(), ds.n_classes())
        .map_err(|e| Error::io(&out, e))?;
    Ok(())
}

/// Trains and writes `metrics.csv`, `checkpoint.ckpt` and `config.json` into
/// the output directory. On a training abort the metrics of the completed
/// epochs are still written before the error is returned.
pub fn cmd_train(args: &TrainArgs, log: &mut dyn Write) -> Result<()> {
    let (mut exp, mut state) = match &args.resume {
        Some(path) => {
            let (train, state) = TrainState::load(path)?;
            let exp = ExperimentFile {
                train,
                outputs: OutputPaths::default(),
            };
            (exp, state)
        }
        None => {
            let exp = ExperimentFile::from_args(&args.run)?;
            let state = TrainState::new(&exp.train)?;
            (exp, state)
        }
    };
    let dir = out_dir(&args.run, &mut exp)?;
    let config = &exp.train;
    config.validate()?;
    write_file(&dir.join(CONFIG_ECHO_FILE), exp.to_json()?.as_bytes())?;

    let data = RunData::new(config)?;
    let metrics_path = dir.join(METRICS_FILE);
    for epoch in state.epochs_completed + 1..=config.epochs {
        match run_epoch(&mut state, config, &data, epoch) {
            Ok(m) => {
                writeln!(
                    log,
                    "epoch {}/{} l_total {:.6} clusters {} max_share {:.3} rand_index {:.4} knn_f1 {:.4}",
                    m.epoch, config.epochs, m.l_total, m.clusters, m.max_share, m.rand_index, m.knn_f1
                )
                .map_err(|e| Error::io(&dir, e))?;
            }
            Err(e) => {
                write_file(&metrics_path, &metrics_to_csv(&state.metrics)?)?;
                return Err(e);
            }
        }
    }
    write_file(&metrics_path, &metrics_to_csv(&state.metrics)?)?;
    state.save(config, &dir.join(CHECKPOINT_FILE))?;
    writeln!(log, "wrote {}", dir.display()).map_err(|e| Error::io(&dir, e))?;
    Ok(())
}

/// One row of the `eval` report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub dim: usize,
    pub assigner_rand_index: f64,
    pub kmeans_k: usize,
    pub kmeans_rand_index: f64,
    pub knn_f1: f64,
    pub clusters: usize,
    pub max_share: f64,
}

#[derive(Serialize)]
struct EvalEcho<'a> {
    checkpoint: &'a Path,
    dataset: &'a Path,
    seed: u64,
    train_fraction: f64,
    kmeans_max_iters: usize,
}

/// Scores a model against a labelled dataset: Rand Index of the assigner's
/// hard labels, Rand Index of K-Means on the encoder features (k = number of
/// label classes), and top-1 KNN F1 on a seeded 75/25 split.
pub fn evaluate_model(params: &ModelParams, ds: &Dataset, seed: u64) -> Result<EvalReport> {
    let (expected, got) = (params.config.input_dim, ds.dim());
    if expected != got {
        return Err(Error::shape(
            "eval",
            format!("checkpoint expects input dim {expected}, dataset has dim {got}"),
        ));
    }
    let emb = params.embed(&ds.x)?;
    let assigned = Partition::new((0..ds.len()).map(|i| argmax(emb.logits.row(i))).collect());
    let stats = cluster_stats(&assigned)?;
    let k = ds.n_classes().clamp(1, ds.len());
    let km = kmeans(&emb.features, k, KMEANS_MAX_ITERS, seed)?;
    let split = Split::new(ds, 0.75, seed);
    let knn_f1 = knn_top1_f1(
        &emb.features.select_rows(&split.train),
        &ds.labels.select(&split.train),
        &emb.features.select_rows(&split.test),
        &ds.labels.select(&split.test),
    )?;
    Ok(EvalReport {
        samples: ds.len(),
        dim: got,
        assigner_rand_index: rand_index(&assigned, &ds.labels)?,
        kmeans_k: k,
        kmeans_rand_index: rand_index(&km.labels, &ds.labels)?,
        knn_f1,
        clusters: stats.count,
        max_share: stats.max_share,
    })
}

pub fn eval_report_to_csv(r: &EvalReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(EVAL_HEADER.split(','))?;
    w.write_record([
        r.samples.to_string(),
        r.dim.to_string(),
        r.assigner_rand_index.to_string(),
        r.kmeans_k.to_string(),
        r.kmeans_rand_index.to_string(),
        r.knn_f1.to_string(),
        r.clusters.to_string(),
        r.max_share.to_string(),
    ])?;
    w.into_inner().map_err(|e| Error::format("eval report", e.to_string()))
}

pub fn cmd_eval(args: &EvalArgs, log: &mut dyn Write) -> Result<()> {
    let params = ModelParams::from_checkpoint(&CheckpointFile::load(&args.checkpoint)?)?;
    let ds = Dataset::load(&args.dataset)?;
    let report = evaluate_model(&params, &ds, args.seed)?;
    write_file(&args.out, &eval_report_to_csv(&report)?)?;
    let echo = EvalEcho {
        checkpoint: &args.checkpoint,
        dataset: &args.dataset,
        seed: args.seed,
        train_fraction: 0.75,
        kmeans_max_iters: KMEANS_MAX_ITERS,
    };
    write_file(&sidecar_path(&args.out), (serde_json::to_string_pretty(&echo)? + "\n").as_bytes())?;
    writeln!(
        log,
        "assigner RI {:.4} | K-Means (k={}) RI {:.4} | KNN F1 {:.4} | clusters {}",
        report.assigner_rand_index, report.kmeans_k, report.kmeans_rand_index, report.knn_f1, report.clusters
    )
    .map_err(|e| Error::io(&args.out, e))?;
    Ok(())
}

pub fn gradcheck_preset(name: &str) -> Result<GradCheckConfig> {
    match name {
        "tiny" => Ok(GradCheckConfig::tiny()),
        other => Err(Error::Param(format!("unknown gradcheck preset {other:?}; valid presets: tiny"))),
    }
}

/// Runs the gradient check and prints its summary; returns whether it passed.
pub fn cmd_gradcheck(args: &GradcheckArgs, log: &mut dyn Write) -> Result<bool> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::format("gradcheck config", format!("{}: {e}", path.display())))?
        }
        None => gradcheck_preset(&args.preset)?,
    };
    cfg.drop_stop_gradient |= args.drop_stop_gradient;
    let outcome = check_objective_gradients(&cfg)?;
    write!(log, "{}", outcome.summary()).map_err(|e| Error::io("<stdout>", e))?;
    Ok(outcome.report.passed())
}

pub fn cmd_ablation(args: &RunArgs, log: &mut dyn Write) -> Result<()> {
    let mut exp = ExperimentFile::from_args(args)?;
    let dir = out_dir(args, &mut exp)?;
    write_file(&dir.join(CONFIG_ECHO_FILE), exp.to_json()?.as_bytes())?;
    let rows = run_ablation(&exp.train)?;
    let table = ablation_to_csv(&rows)?;
    write_file(&dir.join(ABLATION_FILE), &table)?;
    log.write_all(&table).map_err(|e| Error::io(&dir, e))?;
    Ok(())
}

pub fn cmd_print_config(args: &RunArgs, log: &mut dyn Write) -> Result<()> {
    let mut exp = ExperimentFile::from_args(args)?;
    if let Some(out) = &args.out {
        exp.outputs.dir = Some(out.clone());
    }
    log.write_all(exp.to_json()?.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

/// Dispatches a parsed command line. `Ok(false)` means the command ran but
/// its check did not pass.
pub fn run(cli: &Cli, log: &mut dyn Write) -> Result<bool> {
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(a, log).map(|_| true),
        Command::Train(a) => cmd_train(a, log).map(|_| true),
        Command::Eval(a) => cmd_eval(a, log).map(|_| true),
        Command::Gradcheck(a) => cmd_gradcheck(a, log),
        Command::Ablation(a) => cmd_ablation(a, log).map(|_| true),
        Command::PrintConfig(a) => cmd_print_config(a, log).map(|_| true),
    }
}

//! Training loop: momentum SGD under a cosine schedule, one objective per
//! ablation variant, per-epoch evaluation, and checkpoints that can be
//! resumed.
//!
//! Every source of randomness is re-derived at the start of each epoch from
//! `(seed, epoch, stream)`, so a run resumed from a checkpoint sees exactly
//! the random draws of an uninterrupted run.

use std::collections::BTreeMap;
use std::fmt;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::clustering::{cluster_stats, knn_top1_f1, rand_index, Partition};
use crate::data::{batch_iter, generate_synthetic, views_of, AugmentSpec, Dataset, SyntheticSpec, ViewBatch};
use crate::error::{Error, Result};
use crate::kernels::map_indexed;
use crate::model::{init_model, CheckpointFile, ModelConfig, ModelParams, Module, ParamInfo};
use crate::objective::{build_objective, gumbel_sample, LossBreakdown, ObjectiveSpec, DEFAULT_ALPHA};
use crate::tensor::Tensor;

/// Fixed header of the metrics file.
pub const METRICS_HEADER: &str = "epoch,l_inv,l_cluster,l_total,clusters,max_share,rand_index,knn_f1,lr";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Simsiam,
    ClusterOnly,
    JointNoNoise,
    Clusiam,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Simsiam,
        Variant::ClusterOnly,
        Variant::JointNoNoise,
        Variant::Clusiam,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Simsiam => "simsiam",
            Variant::ClusterOnly => "cluster_only",
            Variant::JointNoNoise => "joint_no_noise",
            Variant::Clusiam => "clusiam",
        }
    }

    pub fn uses_cluster_loss(self) -> bool {
        self != Variant::Simsiam
    }

    pub fn uses_noise(self) -> bool {
        matches!(self, Variant::ClusterOnly | Variant::Clusiam)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let valid: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
            Error::Param(format!("unknown variant {s:?}; valid variants: {}", valid.join(", ")))
        })
    }
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

fn default_train_fraction() -> f64 {
    0.75
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub model: ModelConfig,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub fix_pred_lr: bool,
    /// Skip weight decay on batch-norm gamma and beta.
    #[serde(default)]
    pub exclude_bn_from_weight_decay: bool,
    pub data: SyntheticSpec,
    pub aug: AugmentSpec,
    /// Fraction of the dataset used for training; the rest is held out for
    /// the Rand Index and as KNN queries.
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// The default desk-scale experiment on eight 64-dimensional blobs.
    pub fn desk() -> Self {
        let data = SyntheticSpec::blobs8();
        Self {
            variant: Variant::Clusiam,
            model: ModelConfig::desk(data.ambient_dim),
            alpha: DEFAULT_ALPHA,
            base_lr: 0.05,
            weight_decay: 1e-4,
            momentum: 0.9,
            epochs: 30,
            batch_size: 64,
            fix_pred_lr: true,
            exclude_bn_from_weight_decay: false,
            data,
            aug: AugmentSpec::default(),
            train_fraction: default_train_fraction(),
            seed: 0,
        }
    }

    /// A one-epoch run on a few dozen samples.
    pub fn smoke() -> Self {
        let data = SyntheticSpec {
            n_clusters: 3,
            samples_per_cluster: 16,
            ambient_dim: 8,
            center_separation: 5.0,
            within_cluster_sigma: 0.5,
            seed: 0,
        };
        Self {
            model: ModelConfig {
                exploration_space: 4,
                ..ModelConfig::tiny()
            },
            epochs: 1,
            batch_size: 16,
            data,
            ..Self::desk()
        }
    }

    /// Optimiser settings of the full-scale recipe: lr 0.1, batch 512, 50
    /// epochs.
    pub fn paperlike() -> Self {
        let data = SyntheticSpec {
            n_clusters: 16,
            samples_per_cluster: 2000,
            ambient_dim: 128,
            center_separation: 10.0,
            within_cluster_sigma: 1.0,
            seed: 0,
        };
        Self {
            model: ModelConfig {
                encoder_hidden: vec![256],
                feature_dim: 64,
                projector_hidden: 256,
                predictor_hidden: 32,
                exploration_space: 100,
                ..ModelConfig::desk(data.ambient_dim)
            },
            base_lr: 0.1,
            epochs: 50,
            batch_size: 512,
            data,
            ..Self::desk()
        }
    }

    /// The same config with every seed in it set to `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.data.seed = seed;
        c.model.seed = seed;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "smoke" => Ok(Self::smoke()),
            "desk" => Ok(Self::desk()),
            "paperlike" => Ok(Self::paperlike()),
            other => Err(Error::Param(format!(
                "unknown preset {other:?}; valid presets: smoke, desk, paperlike"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let collect = |r: Result<()>, problems: &mut Vec<String>| match r {
            Ok(()) => {}
            Err(Error::Config(p)) => problems.extend(p),
            Err(e) => problems.push(e.to_string()),
        };
        collect(self.model.validate(), &mut problems);
        collect(self.data.validate(), &mut problems);
        collect(self.aug.validate(), &mut problems);
        if !(0.0..=1.0).contains(&self.alpha) {
            problems.push(format!("alpha must be in [0, 1], got {}", self.alpha));
        }
        if self.epochs < 1 {
            problems.push(format!("epochs must be >= 1, got {}", self.epochs));
        }
        if self.batch_size < 2 {
            problems.push(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        for (name, v) in [
            ("base_lr", self.base_lr),
            ("weight_decay", self.weight_decay),
            ("momentum", self.momentum),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                problems.push(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            problems.push(format!("train_fraction must be in (0, 1], got {}", self.train_fraction));
        }
        if self.model.input_dim != self.data.ambient_dim {
            problems.push(format!(
                "model.input_dim {} does not match data.ambient_dim {}",
                self.model.input_dim, self.data.ambient_dim
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    fn sgd(&self) -> SgdSettings {
        SgdSettings {
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            fix_pred_lr: self.fix_pred_lr,
            base_lr: self.base_lr,
            exclude_bn_from_weight_decay: self.exclude_bn_from_weight_decay,
        }
    }

    fn objective_spec(&self, noise: Option<Tensor>) -> ObjectiveSpec {
        ObjectiveSpec {
            use_invariance: self.variant != Variant::ClusterOnly,
            use_cluster: self.variant.uses_cluster_loss(),
            alpha: if self.variant == Variant::ClusterOnly { 1.0 } else { self.alpha },
            noise,
            stop_gradient: true,
        }
    }
}

/// `base_lr · ½(1 + cos(π·epoch/total))`.
pub fn cosine_lr(base_lr: f64, epoch: usize, total_epochs: usize) -> f64 {
    let t = epoch.min(total_epochs) as f64 / total_epochs.max(1) as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdSettings {
    pub momentum: f64,
    pub weight_decay: f64,
    pub fix_pred_lr: bool,
    pub base_lr: f64,
    pub exclude_bn_from_weight_decay: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    /// One buffer per trainable tensor, in [`ModelParams::trainable`] order.
    pub velocity: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            velocity: params
                .trainable()
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape()))
                .collect(),
            step: 0,
        }
    }
}

/// One momentum-SGD step on a single tensor:
/// `g = grad + wd·w; v = μ·v + g; w -= lr·v`.
pub fn sgd_step(w: &mut Tensor, grad: &Tensor, v: &mut Tensor, lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    if w.shape() != grad.shape() || w.shape() != v.shape() {
        return Err(Error::shape(
            "sgd_update",
            format!("param {:?}, grad {:?}, velocity {:?}", w.shape(), grad.shape(), v.shape()),
        ));
    }
    for ((wi, &gi), vi) in w.data_mut().iter_mut().zip(grad.data()).zip(v.data_mut()) {
        let g = gi + weight_decay * *wi;
        *vi = momentum * *vi + g;
        *wi -= lr * *vi;
    }
    Ok(())
}

/// Updates every parameter that received a gradient. Parameters whose
/// gradient is `None` (not reachable from the loss) are left untouched,
/// velocity and weight decay included.
pub fn sgd_update(
    params: &mut ModelParams,
    grads: &[Option<Tensor>],
    state: &mut OptimizerState,
    lr: f64,
    s: &SgdSettings,
) -> Result<()> {
    let infos: Vec<ParamInfo> = params.trainable().into_iter().map(|(i, _)| i).collect();
    if grads.len() != infos.len() || state.velocity.len() != infos.len() {
        return Err(Error::shape(
            "sgd_update",
            format!(
                "{} parameters, {} gradients, {} velocity buffers",
                infos.len(),
                grads.len(),
                state.velocity.len()
            ),
        ));
    }
    for (((w, g), v), info) in params
        .trainable_mut()
        .into_iter()
        .zip(grads)
        .zip(&mut state.velocity)
        .zip(&infos)
    {
        let Some(g) = g else { continue };
        let lr_eff = if s.fix_pred_lr && info.module == Module::Predictor { s.base_lr } else { lr };
        let wd = if s.exclude_bn_from_weight_decay && info.kind.is_batchnorm() {
            0.0
        } else {
            s.weight_decay
        };
        sgd_step(w, g, v, lr_eff, s.momentum, wd)?;
    }
    state.step += 1;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub breakdown: LossBreakdown,
    /// Occupied clusters in the batch (0 when the cluster branch is off).
    pub k: usize,
    pub histogram: BTreeMap<usize, usize>,
    /// Gradient per trainable tensor, `None` where the loss does not reach it.
    pub grads: Vec<Option<Tensor>>,
}

/// One optimizer step on `batch`. `epoch`/`step`
/// only label errors.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    batch: &ViewBatch,
    config: &TrainConfig,
    lr: f64,
    noise_rng: &mut ChaCha8Rng,
    epoch: usize,
    step: usize,
) -> Result<StepReport> {
    let n = batch.x1.rows();
    let noise = (config.variant.uses_noise())
        .then(|| gumbel_sample(2 * n, params.config.exploration_space, noise_rng));
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x1 = tape.leaf(batch.x1.clone());
    let x2 = tape.leaf(batch.x2.clone());
    let out = build_objective(&mut tape, params, &bound, x1, x2, &config.objective_spec(noise))?;

    let mut histogram = BTreeMap::new();
    for &l in out.hard_labels.iter().flatten() {
        *histogram.entry(l).or_insert(0usize) += 1;
    }
    let k = out.centroids.as_ref().map_or(0, |c| c.k);
    let diag = |what: &str| {
        format!(
            "{what}; l_inv {}, l_cluster {}, l_total {}, k {k}, hard-label histogram {histogram:?}, lr {lr}",
            out.breakdown.l_inv, out.breakdown.l_cluster, out.breakdown.l_total
        )
    };
    if !out.breakdown.l_total.is_finite() {
        return Err(Error::NonFinite {
            epoch,
            step,
            detail: diag("loss is not finite"),
        });
    }

    let mut g = tape.backward(out.loss)?;
    let grads: Vec<Option<Tensor>> = bound.vars.iter().map(|&v| g.take(v)).collect();
    sgd_update(params, &grads, opt, lr, &config.sgd())?;
    params.apply_bn_updates(&out.bn_updates)?;
    if let Some((name, _)) = params.named_tensors().into_iter().find(|(_, t)| !t.is_finite()) {
        return Err(Error::NonFinite {
            epoch,
            step,
            detail: diag(&format!("parameter {name} became non-finite after the update")),
        });
    }
    Ok(StepReport {
        breakdown: out.breakdown,
        k,
        histogram,
        grads,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub l_inv: f64,
    pub l_cluster: f64,
    pub l_total: f64,
    pub clusters: usize,
    pub max_share: f64,
    pub rand_index: f64,
    pub knn_f1: f64,
    pub lr: f64,
}

pub fn metrics_to_csv(rows: &[MetricsRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(METRICS_HEADER.split(','))?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::format("metrics", e.to_string()))
}

pub fn metrics_from_csv(bytes: &[u8]) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_reader(bytes);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != METRICS_HEADER {
        return Err(Error::format("metrics", format!("unexpected header {}", header.join(","))));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Noiseless, eval-mode view of a model on a dataset split.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub train_labels: Partition,
    pub eval_labels: Partition,
    pub clusters: usize,
    pub max_share: f64,
    pub rand_index: f64,
    pub knn_f1: f64,
}

/// The training/evaluation split of a dataset. Falls back to evaluating on
/// all samples when the held-out part has fewer than two.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn new(dataset: &Dataset, train_fraction: f64, seed: u64) -> Self {
        let (train, test) = dataset.split_indices(train_fraction, seed);
        let test = if test.len() >= 2 { test } else { (0..dataset.len()).collect() };
        let train = if train.is_empty() { test.clone() } else { train };
        Self { train, test }
    }
}

pub fn evaluate(params: &ModelParams, dataset: &Dataset, split: &Split) -> Result<Evaluation> {
    let emb = params.embed(&dataset.x)?;
    let labels: Vec<usize> = (0..dataset.len())
        .map(|i| crate::autodiff::argmax(emb.logits.row(i)))
        .collect();
    let labels = Partition::new(labels);
    let train_labels = labels.select(&split.train);
    let eval_labels = labels.select(&split.test);
    let stats = cluster_stats(&train_labels)?;
    let rand_index = rand_index(&eval_labels, &dataset.labels.select(&split.test))?;
    let knn_f1 = knn_top1_f1(
        &emb.features.select_rows(&split.train),
        &dataset.labels.select(&split.train),
        &emb.features.select_rows(&split.test),
        &dataset.labels.select(&split.test),
    )?;
    Ok(Evaluation {
        train_labels,
        eval_labels,
        clusters: stats.count,
        max_share: stats.max_share,
        rand_index,
        knn_f1,
    })
}

/// Random streams drawn from within an epoch.
#[derive(Clone, Copy, Debug)]
enum Stream {
    Batches = 0,
    Augment = 1,
    Noise = 2,
    Split = 3,
}

fn stream_seed(seed: u64, epoch: usize, stream: Stream) -> [u8; 32] {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(epoch as u64).to_le_bytes());
    key[16..24].copy_from_slice(&(stream as u64).to_le_bytes());
    key
}

fn stream_rng(seed: u64, epoch: usize, stream: Stream) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(stream_seed(seed, epoch, stream))
}

fn stream_u64(seed: u64, epoch: usize, stream: Stream) -> u64 {
    use rand::Rng;
    stream_rng(seed, epoch, stream).random()
}

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub opt: OptimizerState,
    pub epochs_completed: usize,
    pub metrics: Vec<MetricsRow>,
    /// One digest per completed epoch of the batches fed to the model.
    pub batch_digests: Vec<u64>,
}

const VELOCITY_PREFIX: &str = "optimizer.velocity.";

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        let params = init_model(&config.model)?;
        let opt = OptimizerState::new(&params);
        Ok(Self {
            params,
            opt,
            epochs_completed: 0,
            metrics: Vec::new(),
            batch_digests: Vec::new(),
        })
    }

    pub fn to_checkpoint(&self, config: &TrainConfig) -> CheckpointFile {
        let mut file = self.params.to_checkpoint();
        file.meta = serde_json::json!({
            "model": self.params.config,
            "train": config,
            "epochs_completed": self.epochs_completed,
            "optimizer_step": self.opt.step,
            "metrics": self.metrics,
            "batch_digests": self.batch_digests,
        });
        for ((info, _), v) in self.params.trainable().iter().zip(&self.opt.velocity) {
            file.tensors.push((format!("{VELOCITY_PREFIX}{}", info.name()), v.clone()));
        }
        file
    }

    /// Restores a state saved by [`TrainState::to_checkpoint`], along with the
    /// training config stored in it.
    pub fn from_checkpoint(file: &CheckpointFile) -> Result<(TrainConfig, Self)> {
        let meta = |key: &str| {
            file.meta
                .get(key)
                .cloned()
                .ok_or_else(|| Error::format("checkpoint", format!("metadata has no {key}")))
        };
        let config: TrainConfig = serde_json::from_value(meta("train")?)?;
        let params = ModelParams::from_checkpoint(file)?;
        let mut velocity = Vec::new();
        for (info, t) in params.trainable() {
            let name = format!("{VELOCITY_PREFIX}{}", info.name());
            let v = file
                .get(&name)
                .ok_or_else(|| Error::format("checkpoint", format!("missing tensor {name}")))?;
            if v.shape() != t.shape() {
                return Err(Error::format("checkpoint", format!("{name} has the wrong shape")));
            }
            velocity.push(v.clone());
        }
        let state = Self {
            opt: OptimizerState {
                velocity,
                step: serde_json::from_value(meta("optimizer_step")?)?,
            },
            params,
            epochs_completed: serde_json::from_value(meta("epochs_completed")?)?,
            metrics: serde_json::from_value(meta("metrics")?)?,
            batch_digests: serde_json::from_value(meta("batch_digests")?)?,
        };
        Ok((config, state))
    }

    pub fn save(&self, config: &TrainConfig, path: &Path) -> Result<()> {
        self.to_checkpoint(config).save(path)
    }

    pub fn load(path: &Path) -> Result<(TrainConfig, Self)> {
        Self::from_checkpoint(&CheckpointFile::load(path)?)
    }
}

/// Prepared inputs shared by every epoch of a run.
#[derive(Clone, Debug)]
pub struct RunData {
    pub dataset: Dataset,
    pub split: Split,
}

impl RunData {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        let dataset = generate_synthetic(&config.data)?;
        let split = Split::new(&dataset, config.train_fraction, stream_u64(config.seed, 0, Stream::Split));
        Ok(Self { dataset, split })
    }
}

/// Runs one epoch (1-based `epoch`) and appends its metrics row.
pub fn run_epoch(state: &mut TrainState, config: &TrainConfig, data: &RunData, epoch: usize) -> Result<MetricsRow> {
    let lr = cosine_lr(config.base_lr, epoch - 1, config.epochs);
    let batches = batch_iter(data.split.train.len(), config.batch_size, stream_u64(config.seed, epoch, Stream::Batches))?;
    let mut aug_rng = stream_rng(config.seed, epoch, Stream::Augment);
    let mut noise_rng = stream_rng(config.seed, epoch, Stream::Noise);
    let mut hasher = DefaultHasher::new();
    let mut sums = [0.0; 3];
    for (step, positions) in batches.iter().enumerate() {
        let indices: Vec<usize> = positions.iter().map(|&p| data.split.train[p]).collect();
        let views = views_of(&data.dataset, &indices, &config.aug, &mut aug_rng)?;
        indices.hash(&mut hasher);
        for v in views.x1.data().iter().chain(views.x2.data()) {
            v.to_bits().hash(&mut hasher);
        }
        let report = train_step(&mut state.params, &mut state.opt, &views, config, lr, &mut noise_rng, epoch, step)?;
        sums[0] += report.breakdown.l_inv;
        sums[1] += report.breakdown.l_cluster;
        sums[2] += report.breakdown.l_total;
    }
    let steps = batches.len().max(1) as f64;
    let eval = evaluate(&state.params, &data.dataset, &data.split)?;
    let row = MetricsRow {
        epoch,
        l_inv: sums[0] / steps,
        l_cluster: sums[1] / steps,
        l_total: sums[2] / steps,
        clusters: eval.clusters,
        max_share: eval.max_share,
        rand_index: eval.rand_index,
        knn_f1: eval.knn_f1,
        lr,
    };
    state.metrics.push(row.clone());
    state.batch_digests.push(hasher.finish());
    state.epochs_completed = epoch;
    Ok(row)
}

/// Continues `state` until `until_epoch` epochs are complete.
pub fn resume_training(state: &mut TrainState, config: &TrainConfig, until_epoch: usize) -> Result<()> {
    config.validate()?;
    let data = RunData::new(config)?;
    for epoch in state.epochs_completed + 1..=until_epoch.min(config.epochs) {
        run_epoch(state, config, &data, epoch)?;
    }
    Ok(())
}

/// Trains from scratch for `config.epochs` epochs.
pub fn run_training(config: &TrainConfig) -> Result<TrainState> {
    config.validate()?;
    let mut state = TrainState::new(config)?;
    resume_training(&mut state, config, config.epochs)?;
    Ok(state)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub final_metrics: MetricsRow,
    pub batch_digest: u64,
}

/// Runs all four variants from the same config and seeds.
pub fn run_ablation(base: &TrainConfig) -> Result<Vec<AblationRow>> {
    base.validate()?;
    let runs = map_indexed(Variant::ALL.len(), |i| {
        let config = TrainConfig {
            variant: Variant::ALL[i],
            ..base.clone()
        };
        run_training(&config)
    });
    let mut rows = Vec::with_capacity(runs.len());
    for (variant, run) in Variant::ALL.into_iter().zip(runs) {
        let state = run?;
        let mut h = DefaultHasher::new();
        state.batch_digests.hash(&mut h);
        rows.push(AblationRow {
            variant,
            final_metrics: state.metrics.last().cloned().expect("at least one epoch"),
            batch_digest: h.finish(),
        });
    }
    Ok(rows)
}

pub fn ablation_to_csv(rows: &[AblationRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(
        ["variant"]
            .into_iter()
            .chain(METRICS_HEADER.split(','))
            .chain(["batch_digest"]),
    )?;
    for r in rows {
        let m = &r.final_metrics;
        w.write_record([
            r.variant.name().to_string(),
            m.epoch.to_string(),
            m.l_inv.to_string(),
            m.l_cluster.to_string(),
            m.l_total.to_string(),
            m.clusters.to_string(),
            m.max_share.to_string(),
            m.rand_index.to_string(),
            m.knn_f1.to_string(),
            m.lr.to_string(),
            format!("{:016x}", r.batch_digest),
        ])?;
    }
    w.into_inner().map_err(|e| Error::format("ablation table", e.to_string()))
}

/// Runs `config` once per seed (in parallel) via [`TrainConfig::with_seed`];
/// returns the runs in seed order.
pub fn sweep_seeds(config: &TrainConfig, seeds: &[u64]) -> Vec<Result<TrainState>> {
    map_indexed(seeds.len(), |i| run_training(&config.with_seed(seeds[i])))
}

#[cfg(test)]
mod tests;

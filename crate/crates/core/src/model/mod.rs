//! The four trainable submodules and the Siamese forward pass.
//!
//! * encoder: `Linear → BN → ReLU` blocks, `input_dim → … → feature_dim`
//! * projector: `Linear → BN → ReLU`, then `Linear → BN` (non-affine) or,
//!   with `projector_ends_with_bn = false`, a plain biased `Linear`
//! * predictor: `Linear → BN → ReLU → Linear`, a `D → D/2 → D` bottleneck
//! * assigner: `BN → Linear`, `D → K` logits
//!
//! Linear layers that feed a BN layer carry no bias.

mod checkpoint;

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchNormState, BatchStats, BnMode, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use checkpoint::{CheckpointFile, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

fn default_projector_hidden() -> usize {
    64
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub feature_dim: usize,
    #[serde(default = "default_projector_hidden")]
    pub projector_hidden: usize,
    pub predictor_hidden: usize,
    /// Exploration space: the assigner's output width.
    pub exploration_space: usize,
    pub temperature: f64,
    #[serde(default = "default_true")]
    pub projector_ends_with_bn: bool,
    pub seed: u64,
}

impl ModelConfig {
    /// The desk-scale architecture for `input_dim` inputs.
    pub fn desk(input_dim: usize) -> Self {
        Self {
            input_dim,
            encoder_hidden: vec![64],
            feature_dim: 16,
            projector_hidden: 64,
            predictor_hidden: 8,
            exploration_space: 16,
            temperature: 1.0,
            projector_ends_with_bn: true,
            seed: 0,
        }
    }

    /// The model used for full-graph gradient checks.
    pub fn tiny() -> Self {
        Self {
            input_dim: 8,
            encoder_hidden: vec![16],
            feature_dim: 8,
            projector_hidden: 16,
            predictor_hidden: 4,
            exploration_space: 4,
            temperature: 1.0,
            projector_ends_with_bn: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.input_dim < 1 {
            problems.push("model.input_dim must be >= 1".to_string());
        }
        if self.feature_dim < 2 {
            problems.push(format!("model.feature_dim must be >= 2, got {}", self.feature_dim));
        }
        if self.encoder_hidden.contains(&0) {
            problems.push("model.encoder_hidden widths must be >= 1".to_string());
        }
        if self.projector_hidden < 1 {
            problems.push("model.projector_hidden must be >= 1".to_string());
        }
        if self.predictor_hidden < 1 {
            problems.push("model.predictor_hidden must be >= 1".to_string());
        }
        if self.exploration_space < 1 {
            problems.push("model.exploration_space (K) must be >= 1".to_string());
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            problems.push(format!(
                "model.temperature must be positive and finite, got {}",
                self.temperature
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Module {
    Encoder,
    Projector,
    Predictor,
    Assigner,
}

impl Module {
    pub const ALL: [Module; 4] = [
        Module::Encoder,
        Module::Projector,
        Module::Predictor,
        Module::Assigner,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Module::Encoder => "encoder",
            Module::Projector => "projector",
            Module::Predictor => "predictor",
            Module::Assigner => "assigner",
        }
    }
}

impl fmt::Display for Module {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Linear { weight: Tensor, bias: Option<Tensor> },
    BatchNorm(BatchNormState),
    Relu,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// What a trainable tensor is, for naming and optimizer policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
}

impl ParamKind {
    pub fn name(self) -> &'static str {
        match self {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
            ParamKind::Gamma => "gamma",
            ParamKind::Beta => "beta",
        }
    }

    pub fn is_batchnorm(self) -> bool {
        matches!(self, ParamKind::Gamma | ParamKind::Beta)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamInfo {
    pub module: Module,
    pub layer: usize,
    pub kind: ParamKind,
}

impl ParamInfo {
    pub fn name(&self) -> String {
        format!("{}.{}.{}", self.module, self.layer, self.kind.name())
    }
}

impl Mlp {
    fn trainable<'a>(&'a self, module: Module, out: &mut Vec<(ParamInfo, &'a Tensor)>) {
        for (layer, l) in self.layers.iter().enumerate() {
            let info = |kind| ParamInfo {
                module,
                layer,
                kind,
            };
            match l {
                Layer::Linear { weight, bias } => {
                    out.push((info(ParamKind::Weight), weight));
                    if let Some(b) = bias {
                        out.push((info(ParamKind::Bias), b));
                    }
                }
                Layer::BatchNorm(bn) if bn.affine => {
                    out.push((info(ParamKind::Gamma), &bn.gamma));
                    out.push((info(ParamKind::Beta), &bn.beta));
                }
                Layer::BatchNorm(_) | Layer::Relu => {}
            }
        }
    }

    fn trainable_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        for l in &mut self.layers {
            match l {
                Layer::Linear { weight, bias } => {
                    out.push(weight);
                    if let Some(b) = bias {
                        out.push(b);
                    }
                }
                Layer::BatchNorm(bn) if bn.affine => {
                    out.push(&mut bn.gamma);
                    out.push(&mut bn.beta);
                }
                Layer::BatchNorm(_) | Layer::Relu => {}
            }
        }
    }

    fn bind_from(&self, next: &mut impl Iterator<Item = Var>) -> Option<BoundMlp> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            layers.push(match l {
                Layer::Linear { bias, .. } => {
                    let weight = next.next()?;
                    let bias = match bias {
                        Some(_) => Some(next.next()?),
                        None => None,
                    };
                    LayerVars::Linear { weight, bias }
                }
                Layer::BatchNorm(bn) if bn.affine => LayerVars::BatchNorm {
                    gamma: Some(next.next()?),
                    beta: Some(next.next()?),
                },
                Layer::BatchNorm(_) => LayerVars::BatchNorm {
                    gamma: None,
                    beta: None,
                },
                Layer::Relu => LayerVars::Relu,
            });
        }
        Some(BoundMlp { layers })
    }

    pub fn output_dim(&self) -> Option<usize> {
        self.layers.iter().rev().find_map(|l| match l {
            Layer::Linear { weight, .. } => Some(weight.cols()),
            Layer::BatchNorm(bn) => Some(bn.dim()),
            Layer::Relu => None,
        })
    }

    fn input_dim(&self) -> Option<usize> {
        self.layers.iter().find_map(|l| match l {
            Layer::Linear { weight, .. } => Some(weight.rows()),
            Layer::BatchNorm(bn) => Some(bn.dim()),
            Layer::Relu => None,
        })
    }
}

#[derive(Clone, Debug)]
enum LayerVars {
    Linear { weight: Var, bias: Option<Var> },
    BatchNorm { gamma: Option<Var>, beta: Option<Var> },
    Relu,
}

#[derive(Clone, Debug)]
struct BoundMlp {
    layers: Vec<LayerVars>,
}

/// Tape handles for every trainable tensor of a [`ModelParams`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    encoder: BoundMlp,
    projector: BoundMlp,
    predictor: BoundMlp,
    assigner: BoundMlp,
    /// In [`ModelParams::trainable`] order.
    pub vars: Vec<Var>,
}

/// Train-mode batch statistics to be folded into one BN layer's running
/// averages.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub module: Module,
    pub layer: usize,
    pub stats: BatchStats,
}

/// Graph handles produced by the Siamese forward pass.
#[derive(Clone, Copy, Debug)]
pub struct SiameseOutputs {
    pub y1: Var,
    pub y2: Var,
    pub z1: Var,
    pub z2: Var,
    pub p1: Var,
    pub p2: Var,
    /// `concat(z1, z2)`: rows `0..N` are `z1`, rows `N..2N` are `z2`.
    pub z: Var,
}

/// Eval-mode outputs for a batch of inputs.
#[derive(Clone, Debug)]
pub struct Embeddings {
    /// Encoder features.
    pub features: Tensor,
    pub projections: Tensor,
    pub logits: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub encoder: Mlp,
    pub projector: Mlp,
    pub predictor: Mlp,
    pub assigner: Mlp,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    /// He-normal: N(0, 2 / fan_in).
    fn weight(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
        let data = (0..fan_in * fan_out).map(|_| normal.sample(&mut self.rng)).collect();
        Tensor::matrix(fan_in, fan_out, data).expect("weight shape")
    }

    /// Bias: U(-1/sqrt(fan_in), 1/sqrt(fan_in)), so an all-zero hidden row
    /// still maps to a nonzero output.
    fn bias(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Tensor::vector((0..fan_out).map(|_| self.rng.random_range(-bound..bound)).collect())
    }

    fn linear(&mut self, fan_in: usize, fan_out: usize, bias: bool) -> Layer {
        let weight = self.weight(fan_in, fan_out);
        let bias = bias.then(|| self.bias(fan_in, fan_out));
        Layer::Linear { weight, bias }
    }
}

/// Draws fresh parameters for `config`.
pub fn init_model(config: &ModelConfig) -> Result<ModelParams> {
    config.validate()?;
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(config.seed),
    };
    let d = config.feature_dim;

    let mut encoder = Mlp::default();
    let mut width = config.input_dim;
    for &h in config.encoder_hidden.iter().chain(std::iter::once(&d)) {
        encoder.layers.push(init.linear(width, h, false));
        encoder.layers.push(Layer::BatchNorm(BatchNormState::new(h, true)));
        encoder.layers.push(Layer::Relu);
        width = h;
    }

    let ph = config.projector_hidden;
    let mut projector = Mlp::default();
    projector.layers.push(init.linear(d, ph, false));
    projector.layers.push(Layer::BatchNorm(BatchNormState::new(ph, true)));
    projector.layers.push(Layer::Relu);
    if config.projector_ends_with_bn {
        projector.layers.push(init.linear(ph, d, false));
        projector.layers.push(Layer::BatchNorm(BatchNormState::new(d, false)));
    } else {
        projector.layers.push(init.linear(ph, d, true));
    }

    let bh = config.predictor_hidden;
    let predictor = Mlp {
        layers: vec![
            init.linear(d, bh, false),
            Layer::BatchNorm(BatchNormState::new(bh, true)),
            Layer::Relu,
            init.linear(bh, d, true),
        ],
    };

    let assigner = Mlp {
        layers: vec![
            Layer::BatchNorm(BatchNormState::new(d, true)),
            init.linear(d, config.exploration_space, true),
        ],
    };

    Ok(ModelParams {
        config: config.clone(),
        encoder,
        projector,
        predictor,
        assigner,
    })
}

fn mlp_forward(
    tape: &mut Tape,
    module: Module,
    mlp: &Mlp,
    bound: &BoundMlp,
    mut x: Var,
    mode: BnMode,
    updates: &mut Vec<BnUpdate>,
) -> Result<Var> {
    for (layer, (l, vars)) in mlp.layers.iter().zip(&bound.layers).enumerate() {
        x = match (l, vars) {
            (Layer::Linear { .. }, LayerVars::Linear { weight, bias }) => {
                tape.linear(x, *weight, *bias)?
            }
            (Layer::BatchNorm(state), LayerVars::BatchNorm { gamma, beta }) => {
                let (y, stats) = tape.batchnorm(x, *gamma, *beta, state, mode)?;
                if let Some(stats) = stats {
                    updates.push(BnUpdate {
                        module,
                        layer,
                        stats,
                    });
                }
                y
            }
            (Layer::Relu, LayerVars::Relu) => tape.relu(x),
            _ => unreachable!("bound parameters do not match the model layout"),
        };
    }
    Ok(x)
}

impl ModelParams {
    pub fn module(&self, m: Module) -> &Mlp {
        match m {
            Module::Encoder => &self.encoder,
            Module::Projector => &self.projector,
            Module::Predictor => &self.predictor,
            Module::Assigner => &self.assigner,
        }
    }

    pub fn module_mut(&mut self, m: Module) -> &mut Mlp {
        match m {
            Module::Encoder => &mut self.encoder,
            Module::Projector => &mut self.projector,
            Module::Predictor => &mut self.predictor,
            Module::Assigner => &mut self.assigner,
        }
    }

    /// Trainable tensors in a fixed order: modules as in [`Module::ALL`],
    /// layers front to back.
    pub fn trainable(&self) -> Vec<(ParamInfo, &Tensor)> {
        let mut out = Vec::new();
        for m in Module::ALL {
            self.module(m).trainable(m, &mut out);
        }
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.encoder.trainable_mut(&mut out);
        self.projector.trainable_mut(&mut out);
        self.predictor.trainable_mut(&mut out);
        self.assigner.trainable_mut(&mut out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.trainable().iter().map(|(_, t)| t.len()).sum()
    }

    /// Registers every trainable tensor as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let vars = self
            .trainable()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.clone()))
            .collect();
        self.bind_vars(vars).expect("one leaf per trainable tensor")
    }

    /// Uses caller-provided handles, in [`ModelParams::trainable`] order, as
    /// the trainable tensors.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Result<BoundParams> {
        let expected = self.trainable().len();
        if vars.len() != expected {
            return Err(Error::shape(
                "bind_vars",
                format!("model has {expected} trainable tensors, got {} handles", vars.len()),
            ));
        }
        let mut it = vars.iter().copied();
        let mut next = |m: &Mlp| m.bind_from(&mut it).expect("counted above");
        let encoder = next(&self.encoder);
        let projector = next(&self.projector);
        let predictor = next(&self.predictor);
        let assigner = next(&self.assigner);
        Ok(BoundParams {
            encoder,
            projector,
            predictor,
            assigner,
            vars,
        })
    }

    fn bound_module<'a>(&self, bound: &'a BoundParams, m: Module) -> &'a BoundMlp {
        match m {
            Module::Encoder => &bound.encoder,
            Module::Projector => &bound.projector,
            Module::Predictor => &bound.predictor,
            Module::Assigner => &bound.assigner,
        }
    }

    pub fn run_module(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        module: Module,
        x: Var,
        mode: BnMode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Var> {
        let mlp = self.module(module);
        if let Some(din) = mlp.input_dim() {
            let cols = tape.value(x).cols();
            if cols != din {
                return Err(Error::shape(
                    "model",
                    format!("{module} expects {din} input features, got {cols}"),
                ));
            }
        }
        mlp_forward(tape, module, mlp, self.bound_module(bound, module), x, mode, updates)
    }

    /// `z_i = h(f(x_i))`, `p_i = g(z_i)` for both views with shared weights.
    /// In train mode each view's BN layers see only that view's batch.
    pub fn forward_siamese(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        x1: Var,
        x2: Var,
        mode: BnMode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<SiameseOutputs> {
        let (s1, s2) = (tape.value(x1).shape().to_vec(), tape.value(x2).shape().to_vec());
        if s1 != s2 {
            return Err(Error::shape(
                "forward_siamese",
                format!("views have shapes {s1:?} and {s2:?}"),
            ));
        }
        let mut branch = |tape: &mut Tape, x: Var| -> Result<(Var, Var, Var)> {
            let y = self.run_module(tape, bound, Module::Encoder, x, mode, updates)?;
            let z = self.run_module(tape, bound, Module::Projector, y, mode, updates)?;
            let p = self.run_module(tape, bound, Module::Predictor, z, mode, updates)?;
            Ok((y, z, p))
        };
        let (y1, z1, p1) = branch(tape, x1)?;
        let (y2, z2, p2) = branch(tape, x2)?;
        let z = tape.concat_rows(z1, z2)?;
        Ok(SiameseOutputs {
            y1,
            y2,
            z1,
            z2,
            p1,
            p2,
            z,
        })
    }

    /// `q(Z)`: assigner BN followed by the `D → K` linear map.
    pub fn assigner_logits(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        z: Var,
        mode: BnMode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Var> {
        let d = self.config.feature_dim;
        let cols = tape.value(z).cols();
        if cols != d {
            return Err(Error::shape(
                "assigner_logits",
                format!("assigner expects {d} features, got {cols}"),
            ));
        }
        self.run_module(tape, bound, Module::Assigner, z, mode, updates)
    }

    /// Every head's eval-mode output for `x`.
    pub fn embed(&self, x: &Tensor) -> Result<Embeddings> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let vx = tape.leaf(x.clone());
        let mut updates = Vec::new();
        let y = self.run_module(&mut tape, &bound, Module::Encoder, vx, BnMode::Eval, &mut updates)?;
        let z = self.run_module(&mut tape, &bound, Module::Projector, y, BnMode::Eval, &mut updates)?;
        let logits = self.assigner_logits(&mut tape, &bound, z, BnMode::Eval, &mut updates)?;
        Ok(Embeddings {
            features: tape.value(y).clone(),
            projections: tape.value(z).clone(),
            logits: tape.value(logits).clone(),
        })
    }

    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) -> Result<()> {
        for u in updates {
            match self.module_mut(u.module).layers.get_mut(u.layer) {
                Some(Layer::BatchNorm(state)) => state.update_running(&u.stats)?,
                _ => {
                    return Err(Error::shape(
                        "apply_bn_updates",
                        format!("{}.{} is not a batchnorm layer", u.module, u.layer),
                    ))
                }
            }
        }
        Ok(())
    }

    /// Every tensor, trainable or not, under a stable dotted name.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for m in Module::ALL {
            for (i, l) in self.module(m).layers.iter().enumerate() {
                match l {
                    Layer::Linear { weight, bias } => {
                        out.push((format!("{m}.{i}.weight"), weight));
                        if let Some(b) = bias {
                            out.push((format!("{m}.{i}.bias"), b));
                        }
                    }
                    Layer::BatchNorm(bn) => {
                        out.push((format!("{m}.{i}.gamma"), &bn.gamma));
                        out.push((format!("{m}.{i}.beta"), &bn.beta));
                        out.push((format!("{m}.{i}.running_mean"), &bn.running_mean));
                        out.push((format!("{m}.{i}.running_var"), &bn.running_var));
                    }
                    Layer::Relu => {}
                }
            }
        }
        out
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        let modules = [
            (Module::Encoder, &mut self.encoder),
            (Module::Projector, &mut self.projector),
            (Module::Predictor, &mut self.predictor),
            (Module::Assigner, &mut self.assigner),
        ];
        for (m, mlp) in modules {
            for (i, l) in mlp.layers.iter_mut().enumerate() {
                match l {
                    Layer::Linear { weight, bias } => {
                        out.push((format!("{m}.{i}.weight"), weight));
                        if let Some(b) = bias {
                            out.push((format!("{m}.{i}.bias"), b));
                        }
                    }
                    Layer::BatchNorm(bn) => {
                        out.push((format!("{m}.{i}.gamma"), &mut bn.gamma));
                        out.push((format!("{m}.{i}.beta"), &mut bn.beta));
                        out.push((format!("{m}.{i}.running_mean"), &mut bn.running_mean));
                        out.push((format!("{m}.{i}.running_var"), &mut bn.running_var));
                    }
                    Layer::Relu => {}
                }
            }
        }
        out
    }

    /// Rebuilds a model from its config and a full set of named tensors.
    pub fn from_named(config: &ModelConfig, tensors: &[(String, Tensor)]) -> Result<Self> {
        let mut params = init_model(config)?;
        let lookup: std::collections::HashMap<&str, &Tensor> =
            tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (name, slot) in params.named_tensors_mut() {
            let Some(src) = lookup.get(name.as_str()) else {
                return Err(Error::format("checkpoint", format!("missing tensor {name}")));
            };
            if src.shape() != slot.shape() {
                return Err(Error::format(
                    "checkpoint",
                    format!("{name} has shape {:?}, expected {:?}", src.shape(), slot.shape()),
                ));
            }
            *slot = (*src).clone();
        }
        Ok(params)
    }

    /// A checkpoint holding the config under `meta.model` and every tensor.
    pub fn to_checkpoint(&self) -> CheckpointFile {
        CheckpointFile {
            meta: serde_json::json!({ "model": self.config }),
            tensors: self
                .named_tensors()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
        }
    }

    /// Reads the model back out of a checkpoint; extra tensors are ignored.
    pub fn from_checkpoint(file: &CheckpointFile) -> Result<Self> {
        let config = file
            .meta
            .get("model")
            .ok_or_else(|| Error::format("checkpoint", "metadata has no model config"))?;
        let config: ModelConfig = serde_json::from_value(config.clone())?;
        Self::from_named(&config, &file.tensors)
    }
}

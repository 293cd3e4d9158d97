//! Finite-difference check of the complete training objective on a small
//! model, with the Gumbel noise drawn once and held fixed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check_against, GradCheckReport, Tape, Var};
use crate::error::Result;
use crate::model::{init_model, ModelConfig, ModelParams};
use crate::objective::{build_objective, gumbel_sample, ObjectiveSpec, DEFAULT_ALPHA};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradCheckConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub alpha: f64,
    pub noise: bool,
    /// Builds the analytic graph without the detach on projections so the
    /// checker can be seen to flag it.
    #[serde(default)]
    pub drop_stop_gradient: bool,
    pub data_seed: u64,
    pub tol: f64,
    pub step: f64,
}

impl GradCheckConfig {
    pub fn tiny() -> Self {
        Self {
            model: ModelConfig::tiny(),
            batch_size: 8,
            alpha: DEFAULT_ALPHA,
            noise: true,
            drop_stop_gradient: false,
            data_seed: 7,
            tol: 1e-5,
            step: 1e-5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOutcome {
    pub report: GradCheckReport,
    /// Name of every checked parameter tensor, indexed like `CoordinateError::param`.
    pub param_names: Vec<String>,
    pub loss: f64,
    /// Number of occupied clusters in the checked batch.
    pub clusters: usize,
}

impl GradCheckOutcome {
    pub fn summary(&self) -> String {
        let mut out = format!(
            "checked {} coordinates over {} tensors, loss {:.12}, clusters {}\nmax relative error {:.3e} (tol {:.0e})\n",
            self.report.checked,
            self.param_names.len(),
            self.loss,
            self.clusters,
            self.report.max_rel_error,
            self.report.tol,
        );
        for f in self.report.failures.iter().take(10) {
            out.push_str(&format!(
                "  {}[{}]: analytic {:.6e} numeric {:.6e} rel {:.3e}\n",
                self.param_names[f.param], f.index, f.analytic, f.numeric, f.rel_error
            ));
        }
        out.push_str(if self.report.passed() { "PASS\n" } else { "FAIL\n" });
        out
    }
}

fn inputs(cfg: &GradCheckConfig) -> (Tensor, Tensor, Option<Tensor>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data_seed);
    let (n, d) = (cfg.batch_size, cfg.model.input_dim);
    let draw = |rng: &mut ChaCha8Rng| {
        Tensor::matrix(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .expect("input shape")
    };
    let x1 = draw(&mut rng);
    let x2 = draw(&mut rng);
    let noise = cfg
        .noise
        .then(|| gumbel_sample(2 * n, cfg.model.exploration_space, &mut rng));
    (x1, x2, noise)
}

fn objective(
    tape: &mut Tape,
    vars: &[Var],
    params: &ModelParams,
    x: &(Tensor, Tensor),
    spec: &ObjectiveSpec,
) -> Result<Var> {
    let bound = params.bind_vars(vars.to_vec())?;
    let x1 = tape.leaf(x.0.clone());
    let x2 = tape.leaf(x.1.clone());
    Ok(build_objective(tape, params, &bound, x1, x2, spec)?.loss)
}

pub fn check_objective_gradients(cfg: &GradCheckConfig) -> Result<GradCheckOutcome> {
    let params = init_model(&cfg.model)?;
    let (x1, x2, noise) = inputs(cfg);
    let x = (x1, x2);
    let spec = ObjectiveSpec {
        use_invariance: true,
        use_cluster: true,
        alpha: cfg.alpha,
        noise,
        stop_gradient: true,
    };
    let analytic_spec = ObjectiveSpec {
        stop_gradient: !cfg.drop_stop_gradient,
        ..spec.clone()
    };

    let trainable = params.trainable();
    let param_names = trainable.iter().map(|(info, _)| info.name()).collect();
    let values: Vec<Tensor> = trainable.iter().map(|(_, t)| (*t).clone()).collect();

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let v1 = tape.leaf(x.0.clone());
    let v2 = tape.leaf(x.1.clone());
    let out = build_objective(&mut tape, &params, &bound, v1, v2, &spec)?;
    let clusters = out.centroids.as_ref().map_or(0, |c| c.k);

    let report = grad_check_against(
        |t, v| objective(t, v, &params, &x, &analytic_spec),
        |t, v| objective(t, v, &params, &x, &spec),
        &values,
        cfg.tol,
        cfg.step,
    )?;
    Ok(GradCheckOutcome {
        report,
        param_names,
        loss: out.breakdown.l_total,
        clusters,
    })
}

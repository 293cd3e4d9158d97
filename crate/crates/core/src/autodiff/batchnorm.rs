use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    Train,
    Eval,
}

/// Parameters and running statistics of one batch-normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub epsilon: f64,
    pub momentum: f64,
    /// Whether gamma and beta are trained. A non-affine layer keeps
    /// gamma = 1 and beta = 0.
    pub affine: bool,
}

/// Per-feature statistics of one train-mode batch (biased variance).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

impl BatchNormState {
    pub fn new(dim: usize, affine: bool) -> Self {
        Self {
            gamma: Tensor::full(&[dim], 1.0),
            beta: Tensor::zeros(&[dim]),
            running_mean: Tensor::zeros(&[dim]),
            running_var: Tensor::full(&[dim], 1.0),
            epsilon: DEFAULT_EPSILON,
            momentum: DEFAULT_MOMENTUM,
            affine,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    /// Mixes batch statistics into the running averages:
    /// `running = (1 - momentum) * running + momentum * batch`.
    ///
    /// The running variance uses the unbiased batch estimate, as the common
    /// framework implementations do, and is floored at the smallest positive
    /// double so it never reaches zero.
    pub fn update_running(&mut self, stats: &BatchStats) -> Result<()> {
        if stats.mean.len() != self.dim() || stats.var.len() != self.dim() {
            return Err(Error::shape(
                "batchnorm_update",
                format!("{} features in stats, {} in state", stats.mean.len(), self.dim()),
            ));
        }
        let m = self.momentum;
        let correction = if stats.count > 1 {
            stats.count as f64 / (stats.count - 1) as f64
        } else {
            1.0
        };
        for (r, b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = ((1.0 - m) * *r + m * b * correction).max(f64::MIN_POSITIVE);
        }
        Ok(())
    }
}

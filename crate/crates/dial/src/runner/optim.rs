//! SGD with momentum and a stepped learning-rate schedule.
//!
//! Weight decay is coupled: its gradient wd * W joins the dense-weight
//! gradients inside the step (biases and affine parameters decay-free),
//! matching the objective's (wd / 2) * ||W||^2 term.

use crate::error::{Error, Result};
use crate::net::{ParamKind, ParamStore};

use super::config::ExperimentConfig;

/// Per-tensor velocity buffers.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    velocity: Vec<Vec<f64>>,
    steps: usize,
}

impl OptimizerState {
    pub fn new(params: &ParamStore) -> Self {
        let velocity =
            (0..params.tensor_count()).map(|i| vec![0.0; params.values(i).len()]).collect();
        OptimizerState { velocity, steps: 0 }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }
}

/// One update: g' = g + wd * W (weights only); v <- momentum * v - lr * g';
/// theta <- theta + v.
pub fn sgd_step(
    params: &mut ParamStore,
    opt: &mut OptimizerState,
    lr: f64,
    momentum: f64,
    wd: f64,
) -> Result<()> {
    for i in 0..params.tensor_count() {
        if params.grads(i).iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { tensor: i });
        }
        let decayed = matches!(params.kind(i), ParamKind::Weight { .. });
        let v = &mut opt.velocity[i];
        let (values, grads) = params.values_and_grads(i);
        if v.len() != values.len() {
            return Err(Error::ShapeMismatch { expected: (values.len(), 1), got: (v.len(), 1) });
        }
        for k in 0..values.len() {
            let g = grads[k] + if decayed { wd * values[k] } else { 0.0 };
            v[k] = momentum * v[k] - lr * g;
            values[k] += v[k];
        }
    }
    opt.steps += 1;
    Ok(())
}

/// Learning rate for `epoch`: lr0 divided by lr_drop_factor once per drop
/// fraction already passed. The drop epoch is floor(fraction * epochs),
/// nudged so exact fractions are not lost to float rounding.
pub fn lr_at(epoch: usize, cfg: &ExperimentConfig) -> f64 {
    let drops = cfg
        .lr_drop_at
        .iter()
        .filter(|&&f| epoch >= (f * cfg.epochs as f64 + 1e-9).floor() as usize)
        .count();
    cfg.lr0 / cfg.lr_drop_factor.powi(drops as i32)
}

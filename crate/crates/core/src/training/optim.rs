use log::warn;

use crate::error::{Error, Result};
use crate::network::ModelParams;
use crate::tensor::Tensor;

/// `base_lr · (1 − iter/max_iter)^power`; iterations past `max_iter` clamp
/// to zero.
pub fn poly_lr(base_lr: f64, iter: usize, max_iter: usize, power: f64) -> f64 {
    if iter >= max_iter {
        if iter > max_iter {
            warn!("poly_lr: iteration {iter} beyond max_iter {max_iter}; clamping lr to 0");
        }
        return 0.0;
    }
    base_lr * (1.0 - iter as f64 / max_iter as f64).powf(power)
}

/// SGD with classic momentum and L2 weight decay folded into the velocity:
///
/// ```text
/// v ← m·v + g + wd·p
/// p ← p − lr·v
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocity: ModelParams,
    pub momentum: f64,
    pub weight_decay: f64,
    pub base_lr: f64,
    pub power: f64,
    pub iter: usize,
    pub max_iter: usize,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, base_lr: f64, momentum: f64, weight_decay: f64, power: f64, max_iter: usize) -> Self {
        Self { velocity: params.zeros_like(), momentum, weight_decay, base_lr, power, iter: 0, max_iter }
    }

    pub fn lr(&self) -> f64 {
        poly_lr(self.base_lr, self.iter, self.max_iter, self.power)
    }
}

/// One update at the current schedule position; advances `state.iter`.
/// Returns the learning rate used.
pub fn sgd_step(params: &mut ModelParams, grads: &[Tensor], state: &mut OptimizerState) -> Result<f64> {
    if grads.len() != params.len() {
        return Err(Error::dim(format!("{} gradients for {} parameters", grads.len(), params.len())));
    }
    for ((name, _), g) in params.iter().zip(grads) {
        if let Some(bad) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient in {name} at element {bad}")));
        }
    }
    let lr = state.lr();
    let (m, wd) = (state.momentum, state.weight_decay);
    for (((_, p), (_, v)), g) in params.iter_mut().zip(state.velocity.iter_mut()).zip(grads) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::dim("parameter, velocity and gradient shapes differ"));
        }
        for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = m * *vv + gv + wd * *pv;
            *pv -= lr * *vv;
        }
    }
    state.iter += 1;
    Ok(lr)
}

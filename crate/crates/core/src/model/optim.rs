use crate::error::{Error, Result};
use crate::tensor::NamedTensorMap;

/// Plain SGD with a step schedule: the rate halves every `halving_period`
/// epochs of a global epoch counter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerState {
    pub base_lr: f64,
    pub halving_period: usize,
    pub epoch: usize,
}

impl Default for OptimizerState {
    fn default() -> Self {
        Self {
            base_lr: 1e-2,
            halving_period: 25,
            epoch: 0,
        }
    }
}

impl OptimizerState {
    pub fn new(base_lr: f64, halving_period: usize) -> Self {
        Self {
            base_lr,
            halving_period,
            epoch: 0,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let halvings = epoch / self.halving_period.max(1);
        self.base_lr * 0.5f64.powi(halvings as i32)
    }

    pub fn lr(&self) -> f64 {
        self.lr_at(self.epoch)
    }
}

/// `params -= lr(epoch) * grads`.
pub fn sgd_step(params: &mut NamedTensorMap, grads: &NamedTensorMap, opt: &OptimizerState) -> Result<()> {
    if !params.same_structure(grads) {
        return Err(Error::InvalidShape("gradient map does not match parameters".into()));
    }
    let lr = opt.lr();
    if lr == 0.0 {
        return Ok(());
    }
    for ((_, p), (_, g)) in params.iter_mut().zip(grads.iter()) {
        for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * d;
        }
    }
    Ok(())
}

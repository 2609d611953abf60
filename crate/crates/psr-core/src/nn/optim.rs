//! SGD with classical momentum over flat parameter vectors.

use crate::error::{Error, Result};
use crate::nn::Model;

#[derive(Debug, Clone)]
pub struct SgdOptimizer {
    pub lr: f32,
    pub momentum: f32,
    velocity: Vec<f32>,
}

impl SgdOptimizer {
    pub fn new(lr: f32, momentum: f32, n_params: usize) -> Result<Self> {
        if lr <= 0.0 {
            return Err(Error::InvalidConfig(format!("lr must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidConfig(format!("momentum must be in [0,1), got {momentum}")));
        }
        Ok(Self { lr, momentum, velocity: vec![0.0; n_params] })
    }

    /// `v <- momentum*v + g; p <- p - lr*v`. Velocity persists across calls.
    pub fn step(&mut self, model: &mut Model, grad: &[f32]) -> Result<()> {
        if grad.len() != self.velocity.len() || grad.len() != model.n_params() {
            return Err(Error::ShapeMismatch(format!(
                "gradient has {} values, optimizer state has {}",
                grad.len(),
                self.velocity.len()
            )));
        }
        let mut flat = model.flat_params();
        for ((p, v), &g) in flat.iter_mut().zip(self.velocity.iter_mut()).zip(grad) {
            *v = self.momentum * *v + g;
            *p -= self.lr * *v;
        }
        model.set_flat_params(&flat)
    }
}

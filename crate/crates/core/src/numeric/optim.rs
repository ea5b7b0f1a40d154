use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// SGD with heavy-ball momentum and L2 weight decay folded into the velocity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<f64>,
}

impl OptimizerState {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64, num_params: usize) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {learning_rate}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(Self { learning_rate, momentum, weight_decay, velocity: vec![0.0; num_params] })
    }

    pub fn reset(&mut self) {
        self.velocity.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// `v ← μ·v + g + λ·θ`, `θ ← θ − η·v`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], state: &mut OptimizerState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::Shape(format!(
            "sgd: {} params, {} grads, {} velocity slots",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient at coordinate {i}")));
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        *v = state.momentum * *v + g + state.weight_decay * *p;
        *p -= state.learning_rate * *v;
    }
    Ok(())
}

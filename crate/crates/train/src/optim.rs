//! RMSprop with the Keras update rule.

use candle_core::{backprop::GradStore, Tensor, Var};

use crate::TrainError;

pub const DEFAULT_RHO: f64 = 0.9;
pub const DEFAULT_EPSILON: f64 = 1e-7;

/// `v = rho * v + (1 - rho) * g^2; w -= lr * g / (sqrt(v) + eps)`.
#[derive(Debug)]
pub struct RmsProp {
    lr: f64,
    rho: f64,
    eps: f64,
    vars: Vec<Var>,
    velocity: Vec<Tensor>,
}

impl RmsProp {
    pub fn new(vars: Vec<Var>, lr: f64) -> Result<Self, TrainError> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(TrainError::Config(format!("learning rate {lr} must be finite and >= 0")));
        }
        let velocity = vars.iter().map(|v| v.zeros_like()).collect::<Result<_, _>>()?;
        Ok(Self {
            lr,
            rho: DEFAULT_RHO,
            eps: DEFAULT_EPSILON,
            vars,
            velocity,
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<(), TrainError> {
        for (var, v) in self.vars.iter().zip(self.velocity.iter_mut()) {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // detach so the running average does not chain every past step's graph
            let g = g.detach();
            *v = ((&*v * self.rho)? + (g.sqr()? * (1.0 - self.rho))?)?.detach();
            if self.lr == 0.0 {
                continue;
            }
            let update = (&g / (v.sqrt()? + self.eps)?)?;
            var.set(&(var.as_tensor() - (update * self.lr)?)?)?;
        }
        Ok(())
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Momentum SGD with L2 weight decay.
///
/// `v = momentum * v + (grad + weight_decay * w)`, then `w -= lr * v`.
/// Velocity is kept per parameter position, so the parameter list must be
/// passed in the same order on every step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32, weight_decay: f32) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Restores an optimizer with saved velocity buffers.
    pub fn with_velocity(
        lr: f32,
        momentum: f32,
        weight_decay: f32,
        velocity: Vec<Vec<f32>>,
    ) -> Self {
        Self {
            velocity,
            ..Self::new(lr, momentum, weight_decay)
        }
    }

    pub fn velocity(&self) -> &[Vec<f32>] {
        &self.velocity
    }

    /// Applies one update and clears every gradient slot.
    pub fn step<'a, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = (String, &'a mut Tensor)>,
    {
        let mut params: Vec<(String, &'a mut Tensor)> = params.into_iter().collect();
        if let Some((name, _)) = params.iter().find(|(_, t)| t.grad().is_none()) {
            return Err(Error::MissingGradient(name.clone()));
        }
        if self.velocity.len() != params.len()
            || self
                .velocity
                .iter()
                .zip(&params)
                .any(|(v, (_, t))| v.len() != t.len())
        {
            self.velocity = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        }
        for ((_, param), vel) in params.iter_mut().zip(&mut self.velocity) {
            let grad = param.grad().expect("checked above").to_vec();
            let values = param.values_mut();
            for ((w, g), v) in values.iter_mut().zip(&grad).zip(vel.iter_mut()) {
                *v = self.momentum * *v + (g + self.weight_decay * *w);
                *w -= self.lr * *v;
            }
            param.zero_grad();
        }
        Ok(())
    }
}

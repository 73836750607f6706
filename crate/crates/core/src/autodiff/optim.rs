use serde::{Deserialize, Serialize};

use super::{Result, Tensor, TensorError};

/// SGD hyperparameters. Defaults follow the fine-tuning protocol:
/// learning rate 0.001, momentum 0.9, weight decay 0.0001.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            momentum: 0.9,
            weight_decay: 0.0001,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TensorError::InvalidArgument(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TensorError::InvalidArgument(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(TensorError::InvalidArgument(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Momentum SGD with coupled weight decay:
///
/// ```text
/// v <- momentum * v + grad + weight_decay * param
/// param <- param - lr * v
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            velocity: Vec::new(),
        })
    }

    /// Restores an optimizer with previously saved velocity buffers.
    pub fn with_velocity(config: SgdConfig, velocity: Vec<Vec<f64>>) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, velocity })
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    /// Applies one update and clears the gradients. The parameter order must
    /// be the same on every call.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if let Some(index) = params.iter().position(|p| p.grad().is_none()) {
            return Err(TensorError::MissingGradient { index });
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        if self.velocity.len() != params.len()
            || self
                .velocity
                .iter()
                .zip(params.iter())
                .any(|(v, p)| v.len() != p.len())
        {
            return Err(TensorError::InvalidArgument(
                "optimizer state does not match parameter layout".into(),
            ));
        }
        let SgdConfig {
            learning_rate,
            momentum,
            weight_decay,
        } = self.config;
        for (param, vel) in params.iter_mut().zip(&mut self.velocity) {
            let grad = param.grad().expect("checked above").to_vec();
            for ((w, v), g) in param.values_mut().iter_mut().zip(vel.iter_mut()).zip(grad) {
                *v = momentum * *v + g + weight_decay * *w;
                *w -= learning_rate * *v;
            }
            param.clear_grad();
        }
        Ok(())
    }
}

//! Feature magnitude regularization.
//!
//! Backbone features are softmax-normalized per sample into a
//! pseudo-distribution `p`, and the regularizer is `lambda * sum_i p_i ln p_i`
//! (the negative entropy, averaged over the batch). Minimizing it flattens
//! the feature magnitudes. The coefficient is driven by [`EntropySchedule`]:
//!
//! ```text
//! lambda = beta * (h_max - h) / (h_max - h_init),   h_max = ln D
//! ```
//!
//! where `h` is an exponential moving average of per-batch entropies and
//! `h_init` is the mean entropy over the training set before any update.
//! All entropies are in nats.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Tensor, TensorError, Var};
use crate::data::LabeledDataset;
use crate::models::{Model, ModelError};

/// Tolerance under which `h_init` counts as equal to `h_max`.
pub const DEGENERATE_GAP: f64 = 1e-9;

/// Default coefficient scale for the dynamic schedule.
pub const DEFAULT_BETA: f64 = 50.0;

/// Default decay of the running entropy average.
pub const DEFAULT_EMA_DECAY: f64 = 0.9;

#[derive(Debug, Error, PartialEq)]
pub enum FmrError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("feature dimension must be at least 2, got {0}")]
    FeatureDim(usize),
    #[error("row {row} sums to {sum}, not a distribution")]
    NotNormalized { row: usize, sum: f64 },
    #[error("regularization weight must be finite and >= 0, got {0}")]
    NegativeLambda(f64),
    #[error("spatial maps do not pool to the features (max deviation {0:e})")]
    PoolingMismatch(f64),
    #[error("entropy schedule is not initialized")]
    Uninitialized,
    #[error("invalid schedule parameter: {0}")]
    InvalidSchedule(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] Box<ModelError>),
}

impl From<ModelError> for FmrError {
    fn from(e: ModelError) -> Self {
        FmrError::Model(Box::new(e))
    }
}

pub type Result<T, E = FmrError> = std::result::Result<T, E>;

/// Pooled backbone features `[n, D]`, plus the pre-pooling maps
/// `[n, D, h, w]` for convolutional backbones.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    features: Tensor,
    spatial_maps: Option<Tensor>,
}

impl FeatureBatch {
    pub fn new(features: Tensor, spatial_maps: Option<Tensor>) -> Result<Self> {
        let shape = features.shape();
        if shape.len() != 2 {
            return Err(TensorError::Rank {
                op: "feature_batch",
                expected: 2,
                found: shape.to_vec(),
            }
            .into());
        }
        let (n, d) = (shape[0], shape[1]);
        if d < 2 {
            return Err(FmrError::FeatureDim(d));
        }
        if let Some(maps) = &spatial_maps {
            let ms = maps.shape();
            if ms.len() != 4 || ms[0] != n || ms[1] != d {
                return Err(TensorError::ShapeMismatch {
                    op: "feature_batch",
                    expected: vec![n, d, 0, 0],
                    found: ms.to_vec(),
                }
                .into());
            }
            let hw = ms[2] * ms[3];
            let worst = maps
                .values()
                .chunks(hw)
                .zip(features.values())
                .map(|(plane, f)| (plane.iter().sum::<f64>() / hw as f64 - f).abs())
                .fold(0.0, f64::max);
            if worst > 1e-9 {
                return Err(FmrError::PoolingMismatch(worst));
            }
        }
        Ok(Self {
            features,
            spatial_maps,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn spatial_maps(&self) -> Option<&Tensor> {
        self.spatial_maps.as_ref()
    }

    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }
}

/// Per-sample softmax over the feature dimensions.
pub fn normalize_features(batch: &FeatureBatch) -> Tensor {
    let mut tape = Tape::new();
    let z = tape.leaf(batch.features());
    let p = tape.softmax(z, 1).expect("features are rank 2");
    tape.tensor(p)
}

/// `-sum p ln p` for one distribution, with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// Mean entropy (nats) of the rows of `p`. Used for schedule tracking only;
/// no gradient flows through it.
pub fn batch_entropy(p: &Tensor) -> Result<f64> {
    if p.shape().len() != 2 {
        return Err(TensorError::Rank {
            op: "batch_entropy",
            expected: 2,
            found: p.shape().to_vec(),
        }
        .into());
    }
    let d = p.shape()[1];
    let mut total = 0.0;
    for (row, vals) in p.values().chunks(d).enumerate() {
        let sum: f64 = vals.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || vals.iter().any(|v| *v < 0.0) {
            return Err(FmrError::NotNormalized { row, sum });
        }
        total += entropy(vals);
    }
    Ok(total / p.shape()[0] as f64)
}

/// Batch-mean negative entropy of `softmax(x)` along axis 1, as a tape node.
///
/// Built from `softmax ⊙ log_softmax` so it stays finite when the softmax
/// underflows for large-magnitude inputs.
pub fn mean_negative_entropy(tape: &mut Tape, x: Var) -> Result<Var> {
    let p = tape.softmax(x, 1)?;
    let log_p = tape.log_softmax(x, 1)?;
    let plogp = tape.mul(p, log_p)?;
    let per_sample = tape.sum_axis(plogp, 1)?;
    Ok(tape.mean_all(per_sample))
}

/// `lambda * mean_n sum_d p_{n,d} ln p_{n,d}` with `p = softmax(features)`.
pub fn fmr_loss(tape: &mut Tape, features: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(FmrError::NegativeLambda(lambda));
    }
    let d = tape.shape(features).get(1).copied().unwrap_or(0);
    if d < 2 {
        return Err(FmrError::FeatureDim(d));
    }
    let neg_h = mean_negative_entropy(tape, features)?;
    Ok(tape.scale(neg_h, lambda))
}

/// The MaxEnt baseline: batch-mean negative entropy of the softmax over
/// logits. Scale by the regularizer weight at the call site.
pub fn logit_entropy_loss(tape: &mut Tape, logits: Var) -> Result<Var> {
    mean_negative_entropy(tape, logits)
}

/// Maximum entropy of a `d`-dimensional distribution: `-ln(1/d) = ln d`.
pub fn max_entropy(d: usize) -> Result<f64> {
    if d < 2 {
        return Err(FmrError::FeatureDim(d));
    }
    Ok((d as f64).ln())
}

/// Running state of the dynamic coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropySchedule {
    pub beta: f64,
    pub h_max: f64,
    pub h_init: Option<f64>,
    pub h_ema: f64,
    pub ema_decay: f64,
}

impl EntropySchedule {
    pub fn new(beta: f64, feature_dim: usize, ema_decay: f64) -> Result<Self> {
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(FmrError::InvalidSchedule(format!(
                "beta must be >= 0, got {beta}"
            )));
        }
        if !(0.0..1.0).contains(&ema_decay) {
            return Err(FmrError::InvalidSchedule(format!(
                "ema_decay must be in [0, 1), got {ema_decay}"
            )));
        }
        let h_max = max_entropy(feature_dim)?;
        Ok(Self {
            beta,
            h_max,
            h_init: None,
            h_ema: h_max,
            ema_decay,
        })
    }

    pub fn is_initialized(&self) -> bool {
        self.h_init.is_some()
    }

    /// Sets `h_init` and resets the running average to it.
    pub fn initialize(&mut self, h_init: f64) -> Result<()> {
        if !h_init.is_finite() || h_init < 0.0 || h_init > self.h_max + DEGENERATE_GAP {
            return Err(FmrError::InvalidSchedule(format!(
                "h_init {h_init} outside [0, {}]",
                self.h_max
            )));
        }
        let h_init = h_init.min(self.h_max);
        if self.is_degenerate_at(h_init) {
            log::warn!(
                "initial feature entropy {h_init} is within {DEGENERATE_GAP:e} of ln D = {}; \
                 features are already uniform, lambda is fixed at 0",
                self.h_max
            );
        }
        self.h_init = Some(h_init);
        self.h_ema = h_init;
        Ok(())
    }

    fn is_degenerate_at(&self, h_init: f64) -> bool {
        self.h_max - h_init <= DEGENERATE_GAP
    }

    pub fn is_degenerate(&self) -> bool {
        self.h_init.is_some_and(|h| self.is_degenerate_at(h))
    }

    /// `h_ema <- decay * h_ema + (1 - decay) * batch_h`.
    pub fn update(&mut self, batch_h: f64) -> Result<()> {
        if !self.is_initialized() {
            return Err(FmrError::Uninitialized);
        }
        let batch_h = batch_h.min(self.h_max);
        self.h_ema = self.ema_decay * self.h_ema + (1.0 - self.ema_decay) * batch_h;
        Ok(())
    }

    /// Coefficient for the current step. Returns 0 when the schedule is
    /// degenerate (`h_init` equal to `h_max`).
    pub fn lambda(&self) -> Result<f64> {
        let h_init = self.h_init.ok_or(FmrError::Uninitialized)?;
        if self.is_degenerate_at(h_init) {
            return Ok(0.0);
        }
        let lambda = self.beta * (self.h_max - self.h_ema) / (self.h_max - h_init);
        Ok(lambda.max(0.0))
    }
}

/// Mean per-sample entropy of the normalized features over a whole dataset,
/// one forward pass without gradients.
pub fn initial_entropy(model: &Model, dataset: &LabeledDataset, batch_size: usize) -> Result<f64> {
    if dataset.is_empty() {
        return Err(FmrError::EmptyDataset);
    }
    let batch_size = batch_size.max(1);
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let mut total = 0.0;
    for chunk in indices.chunks(batch_size) {
        let input = dataset.batch_inputs(chunk)?;
        let out = model.forward_values(&input)?;
        let p = normalize_features(&FeatureBatch::new(out.features, None)?);
        total += batch_entropy(&p)? * chunk.len() as f64;
    }
    Ok(total / dataset.len() as f64)
}

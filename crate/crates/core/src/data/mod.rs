//! Labeled datasets: synthetic generators, CSV ingestion and label-fraction
//! subsetting.

mod biased;
mod csv_io;
mod glyph;
mod subsample;

pub use biased::{gen_biased_features, BiasGenConfig};
pub use csv_io::{load_feature_csv, write_feature_csv};
pub use glyph::{gen_glyph_images, load_glyph_archive, write_glyph_archive, GlyphConfig};
pub use subsample::subsample_labels;

use std::fmt;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("dataset is empty")]
    Empty,
    #[error("label {label} at sample {index} outside [0, {classes})")]
    LabelRange {
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("class {class} has no samples in the {split} split")]
    MissingClass { class: usize, split: Split },
    #[error("label fraction must be in (0, 1], got {0}")]
    Fraction(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => f.write_str("train"),
            Split::Test => f.write_str("test"),
        }
    }
}

/// Axis-aligned pixel box `[y0, y1) × [x0, x1)` marking where the class
/// glyph was drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl Region {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y1).contains(&y) && (self.x0..self.x1).contains(&x)
    }
}

/// Feature vectors `[N, F]` or images `[N, c, h, w]` with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    /// Shape of one sample: `[F]` or `[c, h, w]`.
    pub sample_shape: Vec<usize>,
    /// Row-major sample data, `N * prod(sample_shape)` values.
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub split: Split,
    /// Generator config (JSON) or source path.
    pub provenance: String,
    pub seed: u64,
    /// Glyph boxes for generated images.
    pub regions: Option<Vec<Region>>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let s = self.sample_len();
        &self.inputs[i * s..(i + 1) * s]
    }

    /// Stacks the selected samples into `[b, ...sample_shape]`.
    pub fn batch_inputs(&self, indices: &[usize]) -> Result<Tensor, TensorError> {
        let mut values = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            values.extend_from_slice(self.sample(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape);
        Tensor::new(shape, values, false)
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// All inputs as one tensor.
    pub fn all_inputs(&self) -> Result<Tensor, TensorError> {
        let mut shape = vec![self.len()];
        shape.extend_from_slice(&self.sample_shape);
        Tensor::new(shape, self.inputs.clone(), false)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Per-class sample indices in dataset order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    /// Keeps the given samples, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut inputs = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            inputs.extend_from_slice(self.sample(i));
        }
        Self {
            sample_shape: self.sample_shape.clone(),
            inputs,
            labels: self.batch_labels(indices),
            n_classes: self.n_classes,
            split: self.split,
            provenance: self.provenance.clone(),
            seed: self.seed,
            regions: self
                .regions
                .as_ref()
                .map(|r| indices.iter().map(|&i| r[i]).collect()),
        }
    }

    /// Replaces the inputs with a different representation of the same
    /// samples (e.g. backbone features).
    pub fn with_inputs(&self, sample_shape: Vec<usize>, inputs: Vec<f64>) -> Self {
        debug_assert_eq!(
            sample_shape.iter().product::<usize>() * self.len(),
            inputs.len()
        );
        Self {
            sample_shape,
            inputs,
            ..self.clone()
        }
    }

    /// Checks `N > 0`, label range and input length.
    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(DataError::Empty);
        }
        if let Some((index, &label)) = self
            .labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l >= self.n_classes)
        {
            return Err(DataError::LabelRange {
                index,
                label,
                classes: self.n_classes,
            });
        }
        if self.inputs.len() != self.len() * self.sample_len() {
            return Err(TensorError::ShapeMismatch {
                op: "dataset",
                expected: vec![self.len() * self.sample_len()],
                found: vec![self.inputs.len()],
            }
            .into());
        }
        Ok(())
    }

    /// Every class must be represented.
    pub fn check_class_coverage(&self) -> Result<()> {
        if let Some(class) = self.class_counts().iter().position(|&c| c == 0) {
            return Err(DataError::MissingClass {
                class,
                split: self.split,
            });
        }
        Ok(())
    }
}

/// Independent deterministic stream `stream` of generator `seed`.
pub(crate) fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{rng_stream, DataError, LabeledDataset, Result, Split};

/// Synthetic features with a built-in magnitude bias.
///
/// Signal dimensions carry class-conditional Gaussian means and behave the
/// same in both splits. Nuisance dimensions carry a class pattern inflated
/// by `nuisance_scale`; in the train split the pattern matches the label
/// with probability `spurious_strength` (otherwise a uniformly random class
/// pattern is used), in the test split it is always random.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasGenConfig {
    pub n_signal_dims: usize,
    pub n_nuisance_dims: usize,
    pub nuisance_scale: f64,
    pub spurious_strength: f64,
    pub n_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for BiasGenConfig {
    fn default() -> Self {
        Self {
            n_signal_dims: 48,
            n_nuisance_dims: 16,
            nuisance_scale: 5.0,
            spurious_strength: 0.9,
            n_classes: 10,
            train_per_class: 50,
            test_per_class: 50,
            noise_sigma: 1.0,
            seed: 0,
        }
    }
}

/// Standard deviation of the per-dimension class means (before nuisance
/// inflation), shared by signal and nuisance dimensions. Unit scale.
pub const CLASS_MEAN_SCALE: f64 = 1.0;

impl BiasGenConfig {
    pub fn n_features(&self) -> usize {
        self.n_signal_dims + self.n_nuisance_dims
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |m: String| Err(DataError::InvalidConfig(m));
        if self.n_signal_dims == 0 {
            return invalid("n_signal_dims must be positive".into());
        }
        if self.n_features() < 2 {
            return invalid("need at least 2 feature dimensions".into());
        }
        // nuisance_scale = 1 is accepted so the symmetric control can be generated.
        if !(self.nuisance_scale >= 1.0 && self.nuisance_scale.is_finite()) {
            return invalid(format!(
                "nuisance_scale must be >= 1, got {}",
                self.nuisance_scale
            ));
        }
        if !(0.0..=1.0).contains(&self.spurious_strength) {
            return invalid(format!(
                "spurious_strength must be in [0, 1], got {}",
                self.spurious_strength
            ));
        }
        if self.n_classes < 2 {
            return invalid(format!("n_classes must be >= 2, got {}", self.n_classes));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return invalid("every class needs at least one sample per split".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return invalid(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            ));
        }
        Ok(())
    }
}

const STREAM_PROTOTYPES: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_TEST: u64 = 3;

fn gaussian_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            (0..cols)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut *rng);
                    scale * z
                })
                .collect::<Vec<f64>>()
        })
        .collect()
}

/// Generates the `(train, test)` pair. Pure in `config`.
pub fn gen_biased_features(config: &BiasGenConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    config.validate()?;
    let c = config.n_classes;
    let mut proto_rng = rng_stream(config.seed, STREAM_PROTOTYPES);
    let signal_means = gaussian_matrix(&mut proto_rng, c, config.n_signal_dims, CLASS_MEAN_SCALE);
    let nuisance_means =
        gaussian_matrix(&mut proto_rng, c, config.n_nuisance_dims, CLASS_MEAN_SCALE);
    let noise = Normal::new(0.0, config.noise_sigma)
        .map_err(|e| DataError::InvalidConfig(e.to_string()))?;
    let provenance = serde_json::to_string(config).expect("config serializes");

    let make = |split: Split| {
        let (stream, per_class, spurious) = match split {
            Split::Train => (
                STREAM_TRAIN,
                config.train_per_class,
                config.spurious_strength,
            ),
            Split::Test => (STREAM_TEST, config.test_per_class, 0.0),
        };
        let mut rng = rng_stream(config.seed, stream);
        let f = config.n_features();
        let mut inputs = Vec::with_capacity(c * per_class * f);
        let mut labels = Vec::with_capacity(c * per_class);
        for (label, means) in signal_means.iter().enumerate() {
            for _ in 0..per_class {
                for &m in means {
                    inputs.push(m + noise.sample(&mut rng));
                }
                let pattern = if rng.random::<f64>() < spurious {
                    label
                } else {
                    rng.random_range(0..c)
                };
                for &m in &nuisance_means[pattern] {
                    inputs.push(config.nuisance_scale * (m + noise.sample(&mut rng)));
                }
                labels.push(label);
            }
        }
        LabeledDataset {
            sample_shape: vec![f],
            inputs,
            labels,
            n_classes: c,
            split,
            provenance: provenance.clone(),
            seed: config.seed,
            regions: None,
        }
    };
    Ok((make(Split::Train), make(Split::Test)))
}

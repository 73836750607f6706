//! Backbones and the linear classification head.
//!
//! Backbones map an input batch to post-rectifier features `[n, D]`; the
//! convolutional backbone also exposes its final feature maps `[n, D, h, w]`
//! whose spatial mean is exactly the pooled feature. The head computes
//! `logits = f · Wᵀ + b` with `W: [C, D]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Gradients, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("backbone produces {backbone} features but head expects {head}")]
    FeatureDimMismatch { backbone: usize, head: usize },
    #[error("input shape {found:?} does not match model input {expected:?}")]
    InputShape {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("parameter `{name}`: {reason}")]
    Parameter { name: String, reason: String },
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelConfig {
    Mlp {
        input_dim: usize,
        hidden: Vec<usize>,
        feature_dim: usize,
        n_classes: usize,
    },
    Cnn {
        in_channels: usize,
        image_size: usize,
        channels: Vec<usize>,
        strides: Vec<usize>,
        kernel_size: usize,
        n_classes: usize,
    },
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::default_mlp()
    }
}

impl ModelConfig {
    /// 64 → 128 → 64 rectified MLP with a 10-way head.
    pub fn default_mlp() -> Self {
        ModelConfig::Mlp {
            input_dim: 64,
            hidden: vec![128],
            feature_dim: 64,
            n_classes: 10,
        }
    }

    /// Three conv blocks on 3×32×32 images down to 32 channels on an 8×8 grid.
    pub fn default_cnn() -> Self {
        ModelConfig::Cnn {
            in_channels: 3,
            image_size: 32,
            channels: vec![8, 16, 32],
            strides: vec![1, 2, 2],
            kernel_size: 3,
            n_classes: 10,
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            ModelConfig::Mlp { feature_dim, .. } => *feature_dim,
            ModelConfig::Cnn { channels, .. } => channels.last().copied().unwrap_or(0),
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            ModelConfig::Mlp { n_classes, .. } | ModelConfig::Cnn { n_classes, .. } => *n_classes,
        }
    }

    /// Shape of one input sample.
    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            ModelConfig::Mlp { input_dim, .. } => vec![*input_dim],
            ModelConfig::Cnn {
                in_channels,
                image_size,
                ..
            } => vec![*in_channels, *image_size, *image_size],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |m: String| Err(ModelError::InvalidConfig(m));
        if self.feature_dim() < 2 {
            return invalid(format!(
                "feature dimension must be >= 2, got {}",
                self.feature_dim()
            ));
        }
        if self.n_classes() < 2 {
            return invalid(format!("need at least 2 classes, got {}", self.n_classes()));
        }
        match self {
            ModelConfig::Mlp {
                input_dim, hidden, ..
            } => {
                if *input_dim == 0 || hidden.contains(&0) {
                    return invalid("layer widths must be positive".into());
                }
            }
            ModelConfig::Cnn {
                in_channels,
                image_size,
                channels,
                strides,
                kernel_size,
                ..
            } => {
                if *in_channels == 0 || *image_size == 0 || channels.contains(&0) {
                    return invalid("channel counts and image size must be positive".into());
                }
                if channels.len() != strides.len() {
                    return invalid(format!(
                        "{} conv blocks but {} strides",
                        channels.len(),
                        strides.len()
                    ));
                }
                if strides.contains(&0) || *kernel_size == 0 || kernel_size % 2 == 0 {
                    return invalid("kernel size must be odd and strides >= 1".into());
                }
            }
        }
        Ok(())
    }
}

/// One fully connected layer, `weight: [out, in]`, followed by a rectifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpBackbone {
    pub layers: Vec<Dense>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnBackbone {
    pub blocks: Vec<ConvBlock>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Backbone {
    Mlp(MlpBackbone),
    Cnn(CnnBackbone),
}

impl Backbone {
    pub fn feature_dim(&self) -> usize {
        match self {
            Backbone::Mlp(m) => m.layers.last().map_or(0, |l| l.weight.shape()[0]),
            Backbone::Cnn(c) => c.blocks.last().map_or(0, |b| b.kernel.shape()[0]),
        }
    }

    pub fn has_spatial_maps(&self) -> bool {
        matches!(self, Backbone::Cnn(_))
    }
}

/// `logits = f · Wᵀ + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearHead {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let ws = weight.shape();
        if ws.len() != 2 || bias.shape() != [ws[0]] {
            return Err(ModelError::Parameter {
                name: "head".into(),
                reason: format!("weight {:?} and bias {:?} disagree", ws, bias.shape()),
            });
        }
        Ok(Self { weight, bias })
    }

    pub fn n_classes(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Row `c` of the weight matrix.
    pub fn class_weights(&self, c: usize) -> &[f64] {
        self.weight.row(c)
    }

    /// Logits for a single feature vector.
    pub fn logits(&self, feature: &[f64]) -> Vec<f64> {
        (0..self.n_classes())
            .map(|c| {
                self.class_weights(c)
                    .iter()
                    .zip(feature)
                    .map(|(w, f)| w * f)
                    .sum::<f64>()
                    + self.bias.values()[c]
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    pub backbone: Backbone,
    pub head: LinearHead,
}

/// Parameters recorded on a tape, in [`Model::parameters`] order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Tape nodes produced by [`Model::forward`].
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub features: Var,
    pub maps: Option<Var>,
    pub logits: Var,
}

/// Plain values from a gradient-free forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardValues {
    pub features: Tensor,
    pub maps: Option<Tensor>,
    pub logits: Tensor,
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor {
    let n = shape.iter().product();
    let values = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, values, true).expect("shape matches generated values")
}

impl Model {
    /// Deterministic initialization: every weight and bias is drawn from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = match config {
            ModelConfig::Mlp {
                input_dim,
                hidden,
                feature_dim,
                ..
            } => {
                let widths: Vec<usize> = std::iter::once(*input_dim)
                    .chain(hidden.iter().copied())
                    .chain(std::iter::once(*feature_dim))
                    .collect();
                let layers = widths
                    .windows(2)
                    .map(|w| {
                        let bound = 1.0 / (w[0] as f64).sqrt();
                        Dense {
                            weight: uniform_tensor(&mut rng, vec![w[1], w[0]], bound),
                            bias: uniform_tensor(&mut rng, vec![w[1]], bound),
                        }
                    })
                    .collect();
                Backbone::Mlp(MlpBackbone { layers })
            }
            ModelConfig::Cnn {
                in_channels,
                channels,
                strides,
                kernel_size,
                ..
            } => {
                let mut prev = *in_channels;
                let mut blocks = Vec::with_capacity(channels.len());
                for (&c, &stride) in channels.iter().zip(strides) {
                    let bound = 1.0 / ((prev * kernel_size * kernel_size) as f64).sqrt();
                    blocks.push(ConvBlock {
                        kernel: uniform_tensor(
                            &mut rng,
                            vec![c, prev, *kernel_size, *kernel_size],
                            bound,
                        ),
                        bias: uniform_tensor(&mut rng, vec![c], bound),
                        stride,
                        pad: kernel_size / 2,
                    });
                    prev = c;
                }
                Backbone::Cnn(CnnBackbone { blocks })
            }
        };
        let d = config.feature_dim();
        let bound = 1.0 / (d as f64).sqrt();
        let head = LinearHead {
            weight: uniform_tensor(&mut rng, vec![config.n_classes(), d], bound),
            bias: uniform_tensor(&mut rng, vec![config.n_classes()], bound),
        };
        Self::from_parts(config.clone(), backbone, head)
    }

    /// Assembles a model, checking that the backbone width matches the head.
    pub fn from_parts(config: ModelConfig, backbone: Backbone, head: LinearHead) -> Result<Self> {
        config.validate()?;
        let (fb, fh) = (backbone.feature_dim(), head.feature_dim());
        if fb != fh {
            return Err(ModelError::FeatureDimMismatch {
                backbone: fb,
                head: fh,
            });
        }
        if fb != config.feature_dim() || head.n_classes() != config.n_classes() {
            return Err(ModelError::InvalidConfig(format!(
                "parameters ({fb} features, {} classes) disagree with config",
                head.n_classes()
            )));
        }
        Ok(Self {
            config,
            backbone,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.head.feature_dim()
    }

    pub fn n_classes(&self) -> usize {
        self.head.n_classes()
    }

    /// Named parameters in a fixed order.
    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        match &self.backbone {
            Backbone::Mlp(m) => {
                for (i, l) in m.layers.iter().enumerate() {
                    out.push((format!("backbone.layers.{i}.weight"), &l.weight));
                    out.push((format!("backbone.layers.{i}.bias"), &l.bias));
                }
            }
            Backbone::Cnn(c) => {
                for (i, b) in c.blocks.iter().enumerate() {
                    out.push((format!("backbone.blocks.{i}.kernel"), &b.kernel));
                    out.push((format!("backbone.blocks.{i}.bias"), &b.bias));
                }
            }
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        match &mut self.backbone {
            Backbone::Mlp(m) => {
                for l in &mut m.layers {
                    out.push(&mut l.weight);
                    out.push(&mut l.bias);
                }
            }
            Backbone::Cnn(c) => {
                for b in &mut c.blocks {
                    out.push(&mut b.kernel);
                    out.push(&mut b.bias);
                }
            }
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    /// Order-sensitive checksum over every parameter value.
    pub fn checksum(&self) -> u64 {
        self.parameters()
            .iter()
            .fold(0u64, |acc, (_, t)| acc.rotate_left(7) ^ t.checksum())
    }

    /// Records every parameter on the tape. With `trainable = false` the
    /// parameters enter as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .parameters()
            .into_iter()
            .map(|(_, t)| {
                if trainable {
                    tape.leaf(t)
                } else {
                    tape.constant(t.shape().to_vec(), t.values().to_vec())
                        .expect("parameters are well formed")
                }
            })
            .collect();
        BoundParams { vars }
    }

    /// Writes gradients for the bound parameters into their grad slots.
    pub fn store_gradients(&mut self, bound: &BoundParams, grads: &Gradients) -> Result<()> {
        for (p, &v) in self.parameters_mut().into_iter().zip(&bound.vars) {
            grads.write_to(v, p)?;
        }
        Ok(())
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let expected = self.config.input_shape();
        if shape.len() != expected.len() + 1 || shape[1..] != expected[..] {
            return Err(ModelError::InputShape {
                expected,
                found: shape.to_vec(),
            });
        }
        Ok(())
    }

    /// Forward pass on the tape. `input` is `[n, F]` for the MLP and
    /// `[n, c, h, w]` for the CNN.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        input: Var,
    ) -> Result<ForwardVars> {
        self.check_input(tape.shape(input))?;
        let p = &params.vars;
        let n_backbone = p.len() - 2;
        let (features, maps) = match &self.backbone {
            Backbone::Mlp(_) => {
                let mut h = input;
                for layer in p[..n_backbone].chunks(2) {
                    let wt = tape.transpose(layer[0])?;
                    let z = tape.matmul(h, wt)?;
                    let z = tape.add_row_bias(z, layer[1])?;
                    h = tape.relu(z);
                }
                (h, None)
            }
            Backbone::Cnn(c) => {
                let mut h = input;
                for (block, vars) in c.blocks.iter().zip(p[..n_backbone].chunks(2)) {
                    let z = tape.conv2d(h, vars[0], block.stride, block.pad)?;
                    let z = tape.add_channel_bias(z, vars[1])?;
                    h = tape.relu(z);
                }
                (tape.global_avg_pool(h)?, Some(h))
            }
        };
        let wt = tape.transpose(p[n_backbone])?;
        let logits = tape.matmul(features, wt)?;
        let logits = tape.add_row_bias(logits, p[n_backbone + 1])?;
        Ok(ForwardVars {
            features,
            maps,
            logits,
        })
    }

    /// Gradient-free forward pass returning plain tensors.
    pub fn forward_values(&self, input: &Tensor) -> Result<ForwardValues> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let x = tape.constant(input.shape().to_vec(), input.values().to_vec())?;
        let out = self.forward(&mut tape, &params, x)?;
        Ok(ForwardValues {
            features: tape.tensor(out.features),
            maps: out.maps.map(|m| tape.tensor(m)),
            logits: tape.tensor(out.logits),
        })
    }

    /// Named parameter snapshot for serialization.
    pub fn state(&self) -> ModelState {
        ModelState {
            config: self.config.clone(),
            params: self
                .parameters()
                .into_iter()
                .map(|(name, t)| NamedTensor {
                    name,
                    shape: t.shape().to_vec(),
                    values: t.values().to_vec(),
                })
                .collect(),
        }
    }

    /// Rebuilds a model from a snapshot, checking names and shapes against
    /// a freshly initialized model of the same config.
    pub fn from_state(state: &ModelState) -> Result<Self> {
        let mut model = Self::init(&state.config, 0)?;
        let names: Vec<String> = model.parameters().into_iter().map(|(n, _)| n).collect();
        if names.len() != state.params.len() {
            return Err(ModelError::Parameter {
                name: "*".into(),
                reason: format!(
                    "expected {} parameters, found {}",
                    names.len(),
                    state.params.len()
                ),
            });
        }
        for ((name, slot), saved) in names.iter().zip(model.parameters_mut()).zip(&state.params) {
            if *name != saved.name || slot.shape() != saved.shape.as_slice() {
                return Err(ModelError::Parameter {
                    name: saved.name.clone(),
                    reason: format!(
                        "expected `{name}` with shape {:?}, found shape {:?}",
                        slot.shape(),
                        saved.shape
                    ),
                });
            }
            if saved.values.len() != slot.len() {
                return Err(ModelError::Parameter {
                    name: saved.name.clone(),
                    reason: format!("{} values for shape {:?}", saved.values.len(), saved.shape),
                });
            }
            slot.values_mut().copy_from_slice(&saved.values);
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: Vec<NamedTensor>,
}

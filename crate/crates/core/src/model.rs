//! Convolutional classifier: conv blocks (conv 3x3, ReLU, 2x2 max pool),
//! flatten, linear blocks (linear, ReLU, dropout) and a two-way softmax head.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, Mode, Var};
use crate::optim::OptimizerKind;
use crate::records::Diagnosis;
use crate::tensor::{softmax_rows, Tensor, TensorError};

pub const KERNEL_SIZE: usize = 3;
pub const CONV_STRIDE: usize = 1;
pub const CONV_PADDING: usize = 1;
pub const POOL_WINDOW: usize = 2;
pub const NUM_CLASSES: usize = 2;

pub const BLOCK_COUNT_RANGE: (usize, usize) = (2, 6);
pub const UNIT_RANGE: (usize, usize) = (16, 256);
pub const DROPOUT_RANGE: (f64, f64) = (0.2, 0.5);
pub const LEARNING_RATE_RANGE: (f64, f64) = (1e-5, 0.1);

/// Scale applied to the output layer's init bound so a fresh model starts
/// with near-uniform class probabilities.
pub const OUTPUT_INIT_GAIN: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub out_features: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearBlock {
    pub units: usize,
    pub dropout_p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSize {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl InputSize {
    pub fn square(side: usize) -> Self {
        Self {
            height: side,
            width: side,
            channels: 3,
        }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width * self.channels
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub conv_blocks: Vec<ConvBlock>,
    pub linear_blocks: Vec<LinearBlock>,
    pub input_size: InputSize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
}

impl Default for ModelConfig {
    /// Three conv blocks, two linear blocks, Adam at 1e-5, 224x224x3 input.
    fn default() -> Self {
        Self {
            conv_blocks: [32, 64, 128]
                .map(|out_features| ConvBlock { out_features })
                .to_vec(),
            linear_blocks: vec![
                LinearBlock {
                    units: 128,
                    dropout_p: 0.5,
                },
                LinearBlock {
                    units: 64,
                    dropout_p: 0.5,
                },
            ],
            input_size: InputSize::square(224),
            learning_rate: 1e-5,
            optimizer: OptimizerKind::Adam,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigViolation {
    ConvBlockCount(usize),
    LinearBlockCount(usize),
    ConvFeatures {
        block: usize,
        value: usize,
    },
    LinearUnits {
        block: usize,
        value: usize,
    },
    Dropout {
        block: usize,
        value: f64,
    },
    LearningRate(f64),
    Channels(usize),
    InputNotDivisible {
        height: usize,
        width: usize,
        divisor: usize,
    },
}

impl core::fmt::Display for ConfigViolation {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        let (lo, hi) = BLOCK_COUNT_RANGE;
        let (ulo, uhi) = UNIT_RANGE;
        match self {
            Self::ConvBlockCount(n) => write!(f, "conv block count {n} outside [{lo}, {hi}]"),
            Self::LinearBlockCount(n) => write!(f, "linear block count {n} outside [{lo}, {hi}]"),
            Self::ConvFeatures { block, value } => {
                write!(
                    f,
                    "conv block {block} features {value} outside [{ulo}, {uhi}]"
                )
            }
            Self::LinearUnits { block, value } => {
                write!(
                    f,
                    "linear block {block} units {value} outside [{ulo}, {uhi}]"
                )
            }
            Self::Dropout { block, value } => write!(
                f,
                "linear block {block} dropout {value} outside [{}, {}]",
                DROPOUT_RANGE.0, DROPOUT_RANGE.1
            ),
            Self::LearningRate(lr) => write!(
                f,
                "learning rate {lr} outside [{}, {}]",
                LEARNING_RATE_RANGE.0, LEARNING_RATE_RANGE.1
            ),
            Self::Channels(c) => write!(f, "input channel count {c} must be >= 1"),
            Self::InputNotDivisible {
                height,
                width,
                divisor,
            } => {
                write!(f, "input {height}x{width} not divisible by {divisor}")
            }
        }
    }
}

fn join(violations: &[ConfigViolation]) -> String {
    violations
        .iter()
        .map(|v| format!("{v}"))
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model config: {}", join(.0))]
    InvalidConfig(Vec<ConfigViolation>),
    #[error("batch shape {got:?} does not match model input [N, {channels}, {height}, {width}]")]
    InputShape {
        got: Vec<usize>,
        channels: usize,
        height: usize,
        width: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl ModelConfig {
    /// Every violated invariant, in declaration order.
    pub fn violations(&self) -> Vec<ConfigViolation> {
        let mut out = Vec::new();
        let in_range = |n: usize, (lo, hi): (usize, usize)| n >= lo && n <= hi;
        if !in_range(self.conv_blocks.len(), BLOCK_COUNT_RANGE) {
            out.push(ConfigViolation::ConvBlockCount(self.conv_blocks.len()));
        }
        if !in_range(self.linear_blocks.len(), BLOCK_COUNT_RANGE) {
            out.push(ConfigViolation::LinearBlockCount(self.linear_blocks.len()));
        }
        for (block, c) in self.conv_blocks.iter().enumerate() {
            if !in_range(c.out_features, UNIT_RANGE) {
                out.push(ConfigViolation::ConvFeatures {
                    block,
                    value: c.out_features,
                });
            }
        }
        for (block, l) in self.linear_blocks.iter().enumerate() {
            if !in_range(l.units, UNIT_RANGE) {
                out.push(ConfigViolation::LinearUnits {
                    block,
                    value: l.units,
                });
            }
            if !(l.dropout_p >= DROPOUT_RANGE.0 && l.dropout_p <= DROPOUT_RANGE.1) {
                out.push(ConfigViolation::Dropout {
                    block,
                    value: l.dropout_p,
                });
            }
        }
        let lr = self.learning_rate;
        if !(lr >= LEARNING_RATE_RANGE.0 && lr <= LEARNING_RATE_RANGE.1) {
            out.push(ConfigViolation::LearningRate(lr));
        }
        let InputSize {
            height,
            width,
            channels,
        } = self.input_size;
        if channels == 0 {
            out.push(ConfigViolation::Channels(channels));
        }
        let divisor = POOL_WINDOW.pow(self.conv_blocks.len() as u32);
        if height == 0 || width == 0 || height % divisor != 0 || width % divisor != 0 {
            out.push(ConfigViolation::InputNotDivisible {
                height,
                width,
                divisor,
            });
        }
        out
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(ModelError::InvalidConfig(v))
        }
    }

    /// Feature-map side lengths after all conv blocks.
    pub fn conv_output_size(&self) -> (usize, usize) {
        let divisor = POOL_WINDOW.pow(self.conv_blocks.len() as u32);
        (
            self.input_size.height / divisor,
            self.input_size.width / divisor,
        )
    }

    pub fn flattened_features(&self) -> usize {
        let (h, w) = self.conv_output_size();
        let features = self
            .conv_blocks
            .last()
            .map_or(self.input_size.channels, |c| c.out_features);
        features * h * w
    }

    /// Closed-form trainable parameter count.
    pub fn parameter_count(&self) -> usize {
        let mut total = 0;
        let mut channels = self.input_size.channels;
        for c in &self.conv_blocks {
            total += c.out_features * channels * KERNEL_SIZE * KERNEL_SIZE + c.out_features;
            channels = c.out_features;
        }
        let mut width = self.flattened_features();
        for l in &self.linear_blocks {
            total += width * l.units + l.units;
            width = l.units;
        }
        total + width * NUM_CLASSES + NUM_CLASSES
    }
}

/// Layer sequence of a built model; indices point into the parameter list.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d { weight: usize, bias: usize },
    Relu,
    MaxPool2d,
    Flatten,
    Linear { weight: usize, bias: usize },
    Dropout(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    layers: Vec<Layer>,
    params: Vec<Tensor>,
    names: Vec<String>,
}

fn uniform_tensor<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Result<Tensor, TensorError> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape, data)
}

/// Validates `config` and initializes weights uniformly in
/// `±sqrt(6 / fan_in)` (output layer scaled by [`OUTPUT_INIT_GAIN`]), biases at zero.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut params = Vec::new();
    let mut names = Vec::new();
    let mut push = |params: &mut Vec<Tensor>, name: String, t: Tensor| {
        params.push(t);
        names.push(name);
        params.len() - 1
    };

    let mut channels = config.input_size.channels;
    for (i, block) in config.conv_blocks.iter().enumerate() {
        let fan_in = channels * KERNEL_SIZE * KERNEL_SIZE;
        let bound = libm::sqrt(6.0 / fan_in as f64);
        let w = uniform_tensor(
            &[block.out_features, channels, KERNEL_SIZE, KERNEL_SIZE],
            bound,
            &mut rng,
        )?;
        let weight = push(&mut params, format!("conv{i}.weight"), w);
        let bias = push(
            &mut params,
            format!("conv{i}.bias"),
            Tensor::zeros(&[block.out_features])?,
        );
        layers.extend([
            Layer::Conv2d { weight, bias },
            Layer::Relu,
            Layer::MaxPool2d,
        ]);
        channels = block.out_features;
    }
    layers.push(Layer::Flatten);

    let mut width = config.flattened_features();
    for (i, block) in config.linear_blocks.iter().enumerate() {
        let bound = libm::sqrt(6.0 / width as f64);
        let w = uniform_tensor(&[width, block.units], bound, &mut rng)?;
        let weight = push(&mut params, format!("linear{i}.weight"), w);
        let bias = push(
            &mut params,
            format!("linear{i}.bias"),
            Tensor::zeros(&[block.units])?,
        );
        layers.extend([
            Layer::Linear { weight, bias },
            Layer::Relu,
            Layer::Dropout(block.dropout_p),
        ]);
        width = block.units;
    }
    let bound = OUTPUT_INIT_GAIN * libm::sqrt(6.0 / width as f64);
    let w = uniform_tensor(&[width, NUM_CLASSES], bound, &mut rng)?;
    let weight = push(&mut params, String::from("output.weight"), w);
    let bias = push(
        &mut params,
        String::from("output.bias"),
        Tensor::zeros(&[NUM_CLASSES])?,
    );
    layers.push(Layer::Linear { weight, bias });

    Ok(Model {
        config: config.clone(),
        layers,
        params,
        names,
    })
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn check_batch(&self, shape: &[usize]) -> Result<(), ModelError> {
        let InputSize {
            height,
            width,
            channels,
        } = self.config.input_size;
        match *shape {
            [_, c, h, w] if c == channels && h == height && w == width => Ok(()),
            _ => Err(ModelError::InputShape {
                got: shape.to_vec(),
                channels,
                height,
                width,
            }),
        }
    }

    /// Registers every parameter as a trainable leaf of `graph`.
    pub fn attach_params(&self, graph: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| graph.param(p.clone())).collect()
    }

    /// Registers every parameter as a constant.
    pub fn attach_constants(&self, graph: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| graph.leaf(p.clone())).collect()
    }

    /// Appends the network to `graph`, reading weights from `params`
    /// (one var per parameter, in [`Model::params`] order). Returns logits.
    pub fn logits<R: RngCore + ?Sized>(
        &self,
        graph: &mut Graph,
        input: Var,
        params: &[Var],
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var, ModelError> {
        self.check_batch(graph.value(input).shape())?;
        let mut x = input;
        for layer in &self.layers {
            x = match *layer {
                Layer::Conv2d { weight, bias } => {
                    graph.conv2d(x, params[weight], params[bias], CONV_STRIDE, CONV_PADDING)?
                }
                Layer::Relu => graph.relu(x)?,
                Layer::MaxPool2d => graph.maxpool2d(x, POOL_WINDOW)?,
                Layer::Flatten => graph.flatten(x)?,
                Layer::Linear { weight, bias } => graph.linear(x, params[weight], params[bias])?,
                Layer::Dropout(p) => graph.dropout(x, p, mode, rng)?,
            };
        }
        Ok(x)
    }

    /// Class probabilities `[N, 2]` for a batch `[N, C, H, W]`.
    pub fn forward<R: RngCore + ?Sized>(
        &self,
        batch: &Tensor,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Tensor, ModelError> {
        let mut graph = Graph::new();
        let input = graph.leaf(batch.clone());
        let params = self.attach_constants(&mut graph);
        let logits = self.logits(&mut graph, input, &params, mode, rng)?;
        Ok(softmax_rows(graph.value(logits))?)
    }

    /// Eval-mode class decisions.
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<Diagnosis>, ModelError> {
        // Eval mode never draws from the rng.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let probs = self.forward(batch, Mode::Eval, &mut rng)?;
        Ok(predict_from_probabilities(&probs))
    }
}

/// Malignant only when its probability strictly exceeds benign's; an exact
/// tie is called benign.
pub fn predict_from_probabilities(probs: &Tensor) -> Vec<Diagnosis> {
    probs
        .data()
        .chunks(NUM_CLASSES)
        .map(|row| {
            if row[1] > row[0] {
                Diagnosis::Malignant
            } else {
                Diagnosis::Benign
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(side: usize) -> ModelConfig {
        ModelConfig {
            input_size: InputSize::square(side),
            ..ModelConfig::default()
        }
    }

    #[test]
    fn default_config_is_valid_and_halves_three_times() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.conv_output_size(), (28, 28));
        assert_eq!(cfg.learning_rate, 1e-5);
        assert_eq!(cfg.optimizer, OptimizerKind::Adam);
    }

    #[test]
    fn one_conv_block_is_rejected() {
        let mut cfg = ModelConfig::default();
        cfg.conv_blocks.truncate(1);
        match cfg.validate() {
            Err(ModelError::InvalidConfig(v)) => {
                assert!(v.contains(&ConfigViolation::ConvBlockCount(1)))
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn every_violation_is_named() {
        let cfg = ModelConfig {
            conv_blocks: vec![ConvBlock { out_features: 8 }; 7],
            linear_blocks: vec![LinearBlock {
                units: 300,
                dropout_p: 0.6,
            }],
            input_size: InputSize::square(244),
            learning_rate: 0.5,
            optimizer: OptimizerKind::Sgd,
        };
        let v = cfg.violations();
        assert!(v.contains(&ConfigViolation::ConvBlockCount(7)));
        assert!(v.contains(&ConfigViolation::LinearBlockCount(1)));
        assert!(v.contains(&ConfigViolation::ConvFeatures { block: 0, value: 8 }));
        assert!(v.contains(&ConfigViolation::LinearUnits {
            block: 0,
            value: 300
        }));
        assert!(v.contains(&ConfigViolation::Dropout {
            block: 0,
            value: 0.6
        }));
        assert!(v.contains(&ConfigViolation::LearningRate(0.5)));
        assert!(v
            .iter()
            .any(|x| matches!(x, ConfigViolation::InputNotDivisible { height: 244, .. })));
        let msg = format!("{}", ModelError::InvalidConfig(v));
        assert!(msg.contains("learning rate"));
    }

    #[test]
    fn nominal_244_input_is_not_divisible_by_eight() {
        let cfg = small(244);
        assert!(matches!(cfg.validate(), Err(ModelError::InvalidConfig(_))));
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = small(32);
        let a = build_model(&cfg, 17).unwrap();
        let b = build_model(&cfg, 17).unwrap();
        let bits = |m: &Model| -> Vec<u64> {
            m.params()
                .iter()
                .flat_map(|p| p.data().iter().map(|v| v.to_bits()))
                .collect()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&build_model(&cfg, 18).unwrap()));
    }

    #[test]
    fn layer_sequence_ends_in_two_way_linear() {
        let m = build_model(&small(32), 0).unwrap();
        let conv = m
            .layers()
            .iter()
            .filter(|l| matches!(l, Layer::Conv2d { .. }))
            .count();
        let pools = m
            .layers()
            .iter()
            .filter(|l| matches!(l, Layer::MaxPool2d))
            .count();
        assert_eq!((conv, pools), (3, 3));
        let Some(Layer::Linear { weight, .. }) = m.layers().last() else {
            panic!("last layer must be linear")
        };
        assert_eq!(m.params()[*weight].shape(), &[64, 2]);
        assert_eq!(m.param_names().last().unwrap(), "output.bias");
        assert_eq!(m.parameter_count(), m.config().parameter_count());
    }

    #[test]
    fn wrong_batch_shape_is_rejected() {
        let m = build_model(&small(32), 0).unwrap();
        let batch = Tensor::zeros(&[1, 3, 16, 16]).unwrap();
        assert!(matches!(
            m.predict(&batch),
            Err(ModelError::InputShape { .. })
        ));
    }

    #[test]
    fn tie_resolves_to_benign() {
        let probs = Tensor::new(&[3, 2], vec![0.9, 0.1, 0.1, 0.9, 0.5, 0.5]).unwrap();
        assert_eq!(
            predict_from_probabilities(&probs),
            vec![Diagnosis::Benign, Diagnosis::Malignant, Diagnosis::Benign]
        );
    }
}

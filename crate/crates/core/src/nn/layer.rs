use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Architecture of one layer. Trainable kinds carry their parameter shapes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool2d {
        size: usize,
        stride: usize,
    },
    Relu,
    Flatten,
}

impl LayerSpec {
    pub fn is_trainable(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::MaxPool2d { .. } => "maxpool2d",
            LayerSpec::Relu => "relu",
            LayerSpec::Flatten => "flatten",
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => vec![outputs, inputs],
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![out_channels, in_channels, kernel, kernel],
            _ => vec![0],
        }
    }

    pub fn bias_shape(&self) -> Vec<usize> {
        match *self {
            LayerSpec::Dense { outputs, .. } => vec![outputs],
            LayerSpec::Conv2d { out_channels, .. } => vec![out_channels],
            _ => vec![0],
        }
    }

    /// Output shape for a given (unbatched) input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |why: &str| {
            Error::InvalidNetwork(format!(
                "{} layer cannot take input {:?}: {}",
                self.name(),
                input,
                why
            ))
        };
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                if input != [inputs] {
                    return Err(bad(&format!("expected [{inputs}]")));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let [c, h, w] = input else {
                    return Err(bad("expected [C, H, W]"));
                };
                if *c != in_channels {
                    return Err(bad(&format!("expected {in_channels} channels")));
                }
                if stride == 0 || kernel == 0 {
                    return Err(bad("kernel and stride must be positive"));
                }
                if h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return Err(bad("kernel larger than padded input"));
                }
                Ok(vec![
                    out_channels,
                    (h + 2 * padding - kernel) / stride + 1,
                    (w + 2 * padding - kernel) / stride + 1,
                ])
            }
            LayerSpec::MaxPool2d { size, stride } => {
                let [c, h, w] = input else {
                    return Err(bad("expected [C, H, W]"));
                };
                if size == 0 || stride == 0 || *h < size || *w < size {
                    return Err(bad("pool window does not fit"));
                }
                Ok(vec![*c, (h - size) / stride + 1, (w - size) / stride + 1])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Dense { inputs, .. } => inputs,
            LayerSpec::Conv2d {
                in_channels,
                kernel,
                ..
            } => in_channels * kernel * kernel,
            _ => 0,
        }
    }
}

/// One layer: architecture plus parameters (empty for parameterless kinds).
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub(crate) spec: LayerSpec,
    pub(crate) weights: Tensor,
    pub(crate) bias: Tensor,
}

impl Layer {
    /// Builds a layer with explicit parameters, checking their shapes.
    pub fn with_params(spec: LayerSpec, weights: Tensor, bias: Tensor) -> Result<Self> {
        if spec.is_trainable() {
            if weights.shape() != spec.weight_shape().as_slice() {
                return Err(Error::ShapeMismatch {
                    expected: spec.weight_shape(),
                    got: weights.shape().to_vec(),
                });
            }
            if bias.shape() != spec.bias_shape().as_slice() {
                return Err(Error::ShapeMismatch {
                    expected: spec.bias_shape(),
                    got: bias.shape().to_vec(),
                });
            }
        } else if !weights.is_empty() || !bias.is_empty() {
            return Err(Error::InvalidNetwork(format!(
                "{} layer carries no parameters",
                spec.name()
            )));
        }
        if !weights.is_finite() || !bias.is_finite() {
            return Err(Error::InvalidNetwork("non-finite parameter".into()));
        }
        Ok(Self {
            spec,
            weights,
            bias,
        })
    }

    /// Zero-initialised parameters.
    pub fn zeros(spec: LayerSpec) -> Self {
        if spec.is_trainable() {
            let weights = Tensor::zeros(spec.weight_shape());
            let bias = Tensor::zeros(spec.bias_shape());
            Self {
                spec,
                weights,
                bias,
            }
        } else {
            Self::parameterless(spec)
        }
    }

    /// He-style uniform fan-in initialisation: U(-sqrt(6/fan_in), sqrt(6/fan_in)), zero bias.
    pub fn he_uniform<R: Rng + ?Sized>(spec: LayerSpec, rng: &mut R) -> Self {
        if !spec.is_trainable() {
            return Self::parameterless(spec);
        }
        let limit = (6.0 / spec.fan_in() as f64).sqrt() as f32;
        let mut weights = Tensor::zeros(spec.weight_shape());
        for w in weights.data_mut() {
            *w = rng.random_range(-limit..limit);
        }
        let bias = Tensor::zeros(spec.bias_shape());
        Self {
            spec,
            weights,
            bias,
        }
    }

    fn parameterless(spec: LayerSpec) -> Self {
        Self {
            spec,
            weights: Tensor::empty(),
            bias: Tensor::empty(),
        }
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn weights_mut(&mut self) -> &mut Tensor {
        &mut self.weights
    }

    pub fn bias_mut(&mut self) -> &mut Tensor {
        &mut self.bias
    }

    pub fn is_trainable(&self) -> bool {
        self.spec.is_trainable()
    }

    /// Number of neurons (dense outputs or conv output channels).
    pub fn neurons(&self) -> usize {
        match self.spec {
            LayerSpec::Dense { outputs, .. } => outputs,
            LayerSpec::Conv2d { out_channels, .. } => out_channels,
            _ => 0,
        }
    }

    /// Length of each neuron's incoming weight vector.
    pub fn incoming_len(&self) -> usize {
        self.spec.fan_in()
    }
}

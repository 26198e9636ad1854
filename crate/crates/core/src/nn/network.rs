use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use super::layer::{Layer, LayerSpec};
use super::ops;
use crate::error::{Error, Result};
use crate::tensor::{argmax, Tensor};

/// Layered feedforward classifier.
///
/// The network is immutable once built; all evaluation methods take `&self`
/// and are safe to call from many threads at once.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
    num_classes: usize,
    temperature: f32,
    /// `shapes[i]` is the input shape of layer `i`; the last entry is the logits shape.
    shapes: Vec<Vec<usize>>,
    metadata: Map<String, Value>,
}

/// Output of a single-sample forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub class_probs: Vec<f32>,
    pub logits: Vec<f32>,
    /// Activations feeding the final trainable layer.
    pub last_hidden: Vec<f32>,
}

/// Output of a batched forward pass, row-major per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutput {
    pub batch: usize,
    pub num_classes: usize,
    pub class_probs: Vec<f32>,
    pub logits: Vec<f32>,
    pub last_hidden: Vec<f32>,
    pub hidden_width: usize,
}

impl BatchOutput {
    pub fn probs_of(&self, i: usize) -> &[f32] {
        &self.class_probs[i * self.num_classes..(i + 1) * self.num_classes]
    }

    pub fn logits_of(&self, i: usize) -> &[f32] {
        &self.logits[i * self.num_classes..(i + 1) * self.num_classes]
    }

    pub fn predictions(&self) -> Vec<usize> {
        (0..self.batch).map(|i| argmax(self.probs_of(i))).collect()
    }
}

/// Loss whose input gradient an attack follows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    /// Cross-entropy of `softmax(logits / temperature)` against the true label.
    CrossEntropy,
    /// Logit margin `max(Z_y - max_{i != y} Z_i, -kappa)`.
    CarliniWagner { kappa: f32 },
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_entropy" | "ce" => Ok(LossKind::CrossEntropy),
            "cw" | "cw_loss" => Ok(LossKind::CarliniWagner { kappa: 0.0 }),
            other => Err(Error::Config(format!("unknown loss kind '{other}'"))),
        }
    }
}

/// Loss value, input gradient and prediction for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradient {
    pub wrt_input: Tensor,
    pub loss_value: f32,
    pub predicted_class: usize,
    pub class_probs: Vec<f32>,
    /// Label assigned by the attacked model. For a bare network this equals
    /// `predicted_class`; ensembles report their original member's label.
    pub target_class: usize,
}

/// Per-layer parameter gradients; parameterless layers hold empty tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightGradients {
    pub layers: Vec<(Tensor, Tensor)>,
    pub loss: f32,
}

/// Channel and width choices for the default Lenet-5 style model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LenetConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub conv1_filters: usize,
    pub conv2_filters: usize,
    pub kernel: usize,
    pub dense1: usize,
    pub dense2: usize,
    pub num_classes: usize,
}

impl Default for LenetConfig {
    fn default() -> Self {
        Self {
            channels: 1,
            height: 28,
            width: 28,
            conv1_filters: 6,
            conv2_filters: 16,
            kernel: 5,
            dense1: 120,
            dense2: 84,
            num_classes: 10,
        }
    }
}

impl Network {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidNetwork("network has no layers".into()));
        }
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::InvalidNetwork(format!(
                "bad input shape {input_shape:?}"
            )));
        }
        let mut shapes = vec![input_shape.clone()];
        for layer in &layers {
            let next = layer.spec.output_shape(shapes.last().unwrap())?;
            shapes.push(next);
        }
        let out = shapes.last().unwrap();
        if out.len() != 1 || out[0] < 2 {
            return Err(Error::InvalidNetwork(format!(
                "final layer must produce a logits vector of >= 2 classes, got {out:?}"
            )));
        }
        if !matches!(layers.last().unwrap().spec, LayerSpec::Dense { .. }) {
            return Err(Error::InvalidNetwork(
                "final layer must be dense (logits)".into(),
            ));
        }
        let num_classes = out[0];
        Ok(Self {
            layers,
            input_shape,
            num_classes,
            temperature: 1.0,
            shapes,
            metadata: Map::new(),
        })
    }

    /// Randomly initialised network (He-uniform weights, zero biases).
    pub fn random(input_shape: Vec<usize>, specs: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = specs
            .into_iter()
            .map(|s| Layer::he_uniform(s, &mut rng))
            .collect();
        Self::new(input_shape, layers)
    }

    /// Fully connected ReLU network over a flat input.
    pub fn mlp(inputs: usize, hidden: &[usize], classes: usize, seed: u64) -> Result<Self> {
        let mut specs = Vec::new();
        let mut prev = inputs;
        for &h in hidden {
            specs.push(LayerSpec::Dense {
                inputs: prev,
                outputs: h,
            });
            specs.push(LayerSpec::Relu);
            prev = h;
        }
        specs.push(LayerSpec::Dense {
            inputs: prev,
            outputs: classes,
        });
        Self::random(vec![inputs], specs, seed)
    }

    /// Lenet-5 layout: two same-padded conv + max-pool blocks, then three dense layers.
    pub fn lenet5(cfg: LenetConfig, seed: u64) -> Result<Self> {
        let pad = cfg.kernel / 2;
        let flat = cfg.conv2_filters * (cfg.height / 4) * (cfg.width / 4);
        let specs = vec![
            LayerSpec::Conv2d {
                in_channels: cfg.channels,
                out_channels: cfg.conv1_filters,
                kernel: cfg.kernel,
                stride: 1,
                padding: pad,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { size: 2, stride: 2 },
            LayerSpec::Conv2d {
                in_channels: cfg.conv1_filters,
                out_channels: cfg.conv2_filters,
                kernel: cfg.kernel,
                stride: 1,
                padding: pad,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { size: 2, stride: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense {
                inputs: flat,
                outputs: cfg.dense1,
            },
            LayerSpec::Relu,
            LayerSpec::Dense {
                inputs: cfg.dense1,
                outputs: cfg.dense2,
            },
            LayerSpec::Relu,
            LayerSpec::Dense {
                inputs: cfg.dense2,
                outputs: cfg.num_classes,
            },
        ];
        Self::random(vec![cfg.channels, cfg.height, cfg.width], specs, seed)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn temperature(&self) -> f32 {
        self.temperature
    }

    pub fn with_temperature(mut self, temperature: f32) -> Result<Self> {
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        self.temperature = temperature;
        Ok(self)
    }

    /// Input shape of layer `i` (`i == layers().len()` gives the logits shape).
    pub fn shape_at(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn metadata(&self) -> &Map<String, Value> {
        &self.metadata
    }

    pub fn metadata_mut(&mut self) -> &mut Map<String, Value> {
        &mut self.metadata
    }

    pub(crate) fn set_metadata(&mut self, metadata: Map<String, Value>) {
        self.metadata = metadata;
    }

    /// Indices of dense/conv layers, in order.
    pub fn trainable_indices(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].is_trainable())
            .collect()
    }

    /// Width of the activation feeding the final trainable layer.
    pub fn hidden_width(&self) -> usize {
        let last = *self.trainable_indices().last().unwrap();
        self.shapes[last].iter().product()
    }

    /// Count of weights excluding biases.
    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len()).sum()
    }

    /// Count of weights plus biases.
    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Total neuron count over trainable layers.
    pub fn neuron_count(&self) -> usize {
        self.layers.iter().map(Layer::neurons).sum()
    }

    /// SHA-256 over the little-endian parameter payload, hex encoded.
    pub fn weight_digest(&self) -> String {
        let mut hasher = Sha256::new();
        for layer in &self.layers {
            for v in layer.weights.data().iter().chain(layer.bias.data()) {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    fn check_input(&self, shape: &[usize], batched: bool) -> Result<usize> {
        let (batch, rest) = if batched {
            match shape.split_first() {
                Some((b, rest)) => (*b, rest),
                None => (0, shape),
            }
        } else {
            (1, shape)
        };
        if rest != self.input_shape.as_slice() || batch == 0 {
            let mut expected = self.input_shape.clone();
            if batched {
                expected.insert(0, batch.max(1));
            }
            return Err(Error::ShapeMismatch {
                expected,
                got: shape.to_vec(),
            });
        }
        Ok(batch)
    }

    fn check_labels(&self, labels: &[usize]) -> Result<()> {
        for &label in labels {
            if label >= self.num_classes {
                return Err(Error::LabelOutOfRange {
                    label,
                    num_classes: self.num_classes,
                });
            }
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<ForwardOutput> {
        self.check_input(x.shape(), false)?;
        let out = self.forward_flat(x.data(), 1);
        Ok(ForwardOutput {
            class_probs: out.class_probs,
            logits: out.logits,
            last_hidden: out.last_hidden,
        })
    }

    /// Forward pass over a batch tensor of shape `[B, input_shape..]`.
    pub fn forward_batch(&self, xs: &Tensor) -> Result<BatchOutput> {
        let batch = self.check_input(xs.shape(), true)?;
        Ok(self.forward_flat(xs.data(), batch))
    }

    pub(crate) fn forward_flat(&self, xs: &[f32], batch: usize) -> BatchOutput {
        debug_assert_eq!(xs.len(), batch * self.input_len());
        let trace = ops::run(self, xs, batch);
        let logits = trace.acts.last().unwrap().clone();
        let mut class_probs = vec![0.0; logits.len()];
        for (z, p) in logits
            .chunks(self.num_classes)
            .zip(class_probs.chunks_mut(self.num_classes))
        {
            ops::softmax_into(z, self.temperature, p);
        }
        let last = *self.trainable_indices().last().unwrap();
        BatchOutput {
            batch,
            num_classes: self.num_classes,
            class_probs,
            logits,
            last_hidden: trace.acts[last].clone(),
            hidden_width: self.shapes[last].iter().product(),
        }
    }

    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        Ok(argmax(&self.forward(x)?.class_probs))
    }

    pub fn input_gradient(&self, x: &Tensor, y: usize, loss: LossKind) -> Result<LossGradient> {
        self.check_input(x.shape(), false)?;
        self.check_labels(&[y])?;
        let mut out = self.input_gradient_flat(x.data(), &[y], loss);
        let mut g = out.pop().unwrap();
        g.wrt_input = g.wrt_input.reshape(self.input_shape.clone())?;
        Ok(g)
    }

    /// Per-sample input gradients for a batch tensor of shape `[B, input_shape..]`.
    pub fn input_gradient_batch(
        &self,
        xs: &Tensor,
        ys: &[usize],
        loss: LossKind,
    ) -> Result<Vec<LossGradient>> {
        let batch = self.check_input(xs.shape(), true)?;
        if ys.len() != batch {
            return Err(Error::ShapeMismatch {
                expected: vec![batch],
                got: vec![ys.len()],
            });
        }
        self.check_labels(ys)?;
        let mut out = self.input_gradient_flat(xs.data(), ys, loss);
        for g in &mut out {
            g.wrt_input = std::mem::replace(&mut g.wrt_input, Tensor::empty())
                .reshape(self.input_shape.clone())?;
        }
        Ok(out)
    }

    pub(crate) fn input_gradient_flat(
        &self,
        xs: &[f32],
        ys: &[usize],
        loss: LossKind,
    ) -> Vec<LossGradient> {
        let batch = ys.len();
        let trace = ops::run(self, xs, batch);
        let logits = trace.acts.last().unwrap();
        let k = self.num_classes;
        let mut d_logits = vec![0.0f32; batch * k];
        let mut heads = Vec::with_capacity(batch);
        for (i, &y) in ys.iter().enumerate() {
            let z = &logits[i * k..(i + 1) * k];
            let head = ops::loss_head(
                z,
                y,
                loss,
                self.temperature,
                &mut d_logits[i * k..(i + 1) * k],
            );
            heads.push(head);
        }
        let grads = ops::backprop(self, &trace, d_logits, true, false);
        let input_grad = grads.input.unwrap();
        let n = self.input_len();
        heads
            .into_iter()
            .enumerate()
            .map(|(i, (loss_value, class_probs))| {
                let predicted_class = argmax(&class_probs);
                LossGradient {
                    wrt_input: Tensor::from_vec(input_grad[i * n..(i + 1) * n].to_vec()),
                    loss_value,
                    predicted_class,
                    class_probs,
                    target_class: predicted_class,
                }
            })
            .collect()
    }

    /// Batch-averaged cross-entropy gradient with respect to every parameter.
    pub fn weight_gradient(&self, batch: &Tensor, labels: &[usize]) -> Result<WeightGradients> {
        let n = self.check_input(batch.shape(), true)?;
        if labels.len() != n {
            return Err(Error::ShapeMismatch {
                expected: vec![n],
                got: vec![labels.len()],
            });
        }
        self.check_labels(labels)?;
        Ok(self.weight_gradient_flat(batch.data(), labels, self.temperature))
    }

    pub(crate) fn weight_gradient_flat(
        &self,
        xs: &[f32],
        labels: &[usize],
        temperature: f32,
    ) -> WeightGradients {
        let batch = labels.len();
        let trace = ops::run(self, xs, batch);
        let logits = trace.acts.last().unwrap();
        let k = self.num_classes;
        let scale = 1.0 / batch as f32;
        let mut d_logits = vec![0.0f32; batch * k];
        let mut total = 0.0f64;
        for (i, &y) in labels.iter().enumerate() {
            let d = &mut d_logits[i * k..(i + 1) * k];
            let (loss, _) = ops::loss_head(
                &logits[i * k..(i + 1) * k],
                y,
                LossKind::CrossEntropy,
                temperature,
                d,
            );
            total += f64::from(loss);
            for v in d.iter_mut() {
                *v *= scale;
            }
        }
        let grads = ops::backprop(self, &trace, d_logits, false, true);
        let layers = grads
            .layers
            .unwrap()
            .into_iter()
            .zip(&self.layers)
            .map(|((w, b), layer)| {
                (
                    Tensor::new(layer.weights.shape().to_vec(), w).unwrap(),
                    Tensor::new(layer.bias.shape().to_vec(), b).unwrap(),
                )
            })
            .collect();
        WeightGradients {
            layers,
            loss: (total / batch as f64) as f32,
        }
    }

    /// Plain SGD update `w -= lr * g`.
    pub fn sgd_step(&mut self, grads: &WeightGradients, lr: f32) -> Result<()> {
        if grads.layers.len() != self.layers.len() {
            return Err(Error::Config("gradient/layer count mismatch".into()));
        }
        for (layer, (gw, gb)) in self.layers.iter_mut().zip(&grads.layers) {
            if gw.len() != layer.weights.len() || gb.len() != layer.bias.len() {
                return Err(Error::Config("gradient shape mismatch".into()));
            }
            for (w, g) in layer.weights.data_mut().iter_mut().zip(gw.data()) {
                *w -= lr * g;
            }
            for (b, g) in layer.bias.data_mut().iter_mut().zip(gb.data()) {
                *b -= lr * g;
            }
        }
        Ok(())
    }

    /// Fraction of samples whose argmax prediction matches the label.
    pub fn accuracy(&self, images: &[f32], labels: &[usize]) -> f32 {
        if labels.is_empty() {
            return 0.0;
        }
        let n = self.input_len();
        let mut correct = 0usize;
        for (xs, ys) in images.chunks(256 * n).zip(labels.chunks(256)) {
            let out = self.forward_flat(xs, ys.len());
            correct += out
                .predictions()
                .iter()
                .zip(ys)
                .filter(|(p, y)| p == y)
                .count();
        }
        correct as f32 / labels.len() as f32
    }
}

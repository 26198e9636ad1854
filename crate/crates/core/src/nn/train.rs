use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::network::Network;
use crate::data::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd { momentum: f32 },
    Adam { beta1: f32, beta2: f32, eps: f32 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f32,
    /// Softmax temperature used by the training loss only; the returned
    /// network evaluates at temperature 1.
    pub temperature: f32,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            learning_rate: 1e-3,
            temperature: 1.0,
            batch_size: 64,
            seed: 0,
            optimizer: Optimizer::adam(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f32>,
    pub test_accuracy: f32,
}

/// Mini-batch training on a private copy of `net`.
///
/// Deterministic for a fixed `cfg.seed`. The returned network has its
/// temperature reset to 1 and carries the run parameters in its metadata.
pub fn train(
    net: &Network,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Network, TrainReport)> {
    if !(cfg.learning_rate > 0.0 && cfg.learning_rate.is_finite()) {
        return Err(Error::Config(format!(
            "learning rate must be positive, got {}",
            cfg.learning_rate
        )));
    }
    if !(cfg.temperature > 0.0 && cfg.temperature.is_finite()) {
        return Err(Error::Config("temperature must be positive".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if train_set.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    for ds in [train_set, test_set] {
        if ds.sample_shape() != net.input_shape() {
            return Err(Error::ShapeMismatch {
                expected: net.input_shape().to_vec(),
                got: ds.sample_shape().to_vec(),
            });
        }
        if let Some(&bad) = ds.labels().iter().find(|&&l| l >= net.num_classes()) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                num_classes: net.num_classes(),
            });
        }
    }

    let mut model = net.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptimizerState::new(&model, cfg.optimizer);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let n = train_set.sample_len();
    let mut xs = Vec::with_capacity(cfg.batch_size * n);
    let mut ys = Vec::with_capacity(cfg.batch_size);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            xs.clear();
            ys.clear();
            for &i in chunk {
                xs.extend_from_slice(train_set.image(i));
                ys.push(train_set.label(i));
            }
            let grads = model.weight_gradient_flat(&xs, &ys, cfg.temperature);
            if !grads.loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            state.apply(&mut model, &grads.layers, cfg.learning_rate);
            total += f64::from(grads.loss);
            batches += 1;
        }
        let mean = (total / batches as f64) as f32;
        let params_finite = model
            .layers()
            .iter()
            .all(|l| l.weights().is_finite() && l.bias().is_finite());
        if !mean.is_finite() || !params_finite {
            return Err(Error::Diverged { epoch });
        }
        epoch_losses.push(mean);
    }

    let model = model.with_temperature(1.0)?;
    let test_accuracy = model.accuracy(test_set.images(), test_set.labels());
    let mut model = model;
    model.metadata_mut().insert(
        "training".into(),
        json!({
            "epochs": cfg.epochs,
            "learning_rate": cfg.learning_rate,
            "temperature": cfg.temperature,
            "batch_size": cfg.batch_size,
            "seed": cfg.seed,
            "optimizer": cfg.optimizer,
            "test_accuracy": test_accuracy,
        }),
    );
    Ok((
        model,
        TrainReport {
            epoch_losses,
            test_accuracy,
        },
    ))
}

struct OptimizerState {
    optimizer: Optimizer,
    step: i32,
    first: Vec<(Vec<f32>, Vec<f32>)>,
    second: Vec<(Vec<f32>, Vec<f32>)>,
}

impl OptimizerState {
    fn new(net: &Network, optimizer: Optimizer) -> Self {
        let zeros = || -> Vec<(Vec<f32>, Vec<f32>)> {
            net.layers()
                .iter()
                .map(|l| (vec![0.0; l.weights().len()], vec![0.0; l.bias().len()]))
                .collect()
        };
        Self {
            optimizer,
            step: 0,
            first: zeros(),
            second: match optimizer {
                Optimizer::Adam { .. } => zeros(),
                Optimizer::Sgd { .. } => Vec::new(),
            },
        }
    }

    fn apply(
        &mut self,
        net: &mut Network,
        grads: &[(crate::tensor::Tensor, crate::tensor::Tensor)],
        lr: f32,
    ) {
        self.step += 1;
        for (li, layer) in net.layers_mut().iter_mut().enumerate() {
            if !layer.is_trainable() {
                continue;
            }
            let (gw, gb) = &grads[li];
            let pairs = [
                (layer.weights.data_mut(), gw.data(), 0),
                (layer.bias.data_mut(), gb.data(), 1),
            ];
            for (params, g, which) in pairs {
                let m = if which == 0 {
                    &mut self.first[li].0
                } else {
                    &mut self.first[li].1
                };
                match self.optimizer {
                    Optimizer::Sgd { momentum } => {
                        for ((p, g), v) in params.iter_mut().zip(g).zip(m.iter_mut()) {
                            *v = momentum * *v + g;
                            *p -= lr * *v;
                        }
                    }
                    Optimizer::Adam { beta1, beta2, eps } => {
                        let v = if which == 0 {
                            &mut self.second[li].0
                        } else {
                            &mut self.second[li].1
                        };
                        let c1 = 1.0 - beta1.powi(self.step);
                        let c2 = 1.0 - beta2.powi(self.step);
                        for (((p, g), m), v) in
                            params.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut())
                        {
                            *m = beta1 * *m + (1.0 - beta1) * g;
                            *v = beta2 * *v + (1.0 - beta2) * g * g;
                            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                        }
                    }
                }
            }
        }
    }
}

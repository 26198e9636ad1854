//! Simple-average ensembles of an original model and its mutants.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::{check_batch, GradientProvider};
use crate::error::{Error, ModelIoError, Result};
use crate::nn::{self, LossGradient, LossKind, Network};
use crate::tensor::{argmax, Tensor};

/// Ordered base models; index 0 is always the original model.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    models: Vec<Network>,
}

impl EnsembleModel {
    pub fn new(original: Network, mutants: Vec<Network>) -> Result<Self> {
        let mut models = Vec::with_capacity(mutants.len() + 1);
        models.push(original);
        models.extend(mutants);
        Self::from_members(models)
    }

    /// `models[0]` is treated as the original.
    pub fn from_members(models: Vec<Network>) -> Result<Self> {
        let first = models
            .first()
            .ok_or_else(|| Error::Empty("ensemble needs the original model".into()))?;
        for m in &models[1..] {
            if m.input_shape() != first.input_shape() || m.num_classes() != first.num_classes() {
                return Err(Error::InvalidNetwork(
                    "ensemble members must share input shape and class count".into(),
                ));
            }
        }
        Ok(Self { models })
    }

    pub fn original(&self) -> &Network {
        &self.models[0]
    }

    pub fn members(&self) -> &[Network] {
        &self.models
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Mean of member gradients, losses and probabilities.
    pub fn ensemble_gradient(&self, x: &Tensor, y: usize, loss: LossKind) -> Result<LossGradient> {
        let original = self.original();
        if x.shape() != original.input_shape() {
            return Err(Error::ShapeMismatch {
                expected: original.input_shape().to_vec(),
                got: x.shape().to_vec(),
            });
        }
        let mut g = self.loss_gradients(x.data(), &[y], loss)?.remove(0);
        g.wrt_input = g.wrt_input.reshape(original.input_shape().to_vec())?;
        Ok(g)
    }

    /// Averaged probabilities and their argmax (lowest class on ties).
    pub fn ensemble_predict(&self, x: &Tensor) -> Result<(Vec<f32>, usize)> {
        let original = self.original();
        if x.shape() != original.input_shape() {
            return Err(Error::ShapeMismatch {
                expected: original.input_shape().to_vec(),
                got: x.shape().to_vec(),
            });
        }
        let probs = self.predict_flat(x.data(), 1).remove(0);
        let label = argmax(&probs);
        Ok((probs, label))
    }

    fn predict_flat(&self, xs: &[f32], batch: usize) -> Vec<Vec<f32>> {
        let k = self.original().num_classes();
        let mut acc = vec![0.0f64; batch * k];
        for m in &self.models {
            let out = m.forward_flat(xs, batch);
            for (a, p) in acc.iter_mut().zip(&out.class_probs) {
                *a += f64::from(*p);
            }
        }
        let scale = self.models.len() as f64;
        acc.chunks(k)
            .map(|c| c.iter().map(|v| (v / scale) as f32).collect())
            .collect()
    }

    /// Ensemble accuracy under averaged-probability prediction.
    pub fn accuracy(&self, images: &[f32], labels: &[usize]) -> f32 {
        if labels.is_empty() {
            return 0.0;
        }
        let n = self.original().input_len();
        let mut correct = 0;
        for (xs, ys) in images.chunks(256 * n).zip(labels.chunks(256)) {
            for (p, &y) in self.predict_flat(xs, ys.len()).iter().zip(ys) {
                correct += usize::from(argmax(p) == y);
            }
        }
        correct as f32 / labels.len() as f32
    }
}

impl GradientProvider for EnsembleModel {
    fn input_shape(&self) -> &[usize] {
        self.original().input_shape()
    }

    fn num_classes(&self) -> usize {
        self.original().num_classes()
    }

    fn model_count(&self) -> usize {
        self.models.len()
    }

    fn loss_gradients(
        &self,
        xs: &[f32],
        ys: &[usize],
        loss: LossKind,
    ) -> Result<Vec<LossGradient>> {
        let n = self.input_len();
        let k = self.num_classes();
        check_batch(n, k, xs, Some(ys))?;
        let batch = ys.len();
        let mut grad = vec![0.0f64; batch * n];
        let mut probs = vec![0.0f64; batch * k];
        let mut losses = vec![0.0f64; batch];
        let mut target = Vec::new();
        for (mi, m) in self.models.iter().enumerate() {
            let member = m.input_gradient_flat(xs, ys, loss);
            for (i, g) in member.iter().enumerate() {
                for (a, v) in grad[i * n..(i + 1) * n].iter_mut().zip(g.wrt_input.data()) {
                    *a += f64::from(*v);
                }
                for (a, v) in probs[i * k..(i + 1) * k].iter_mut().zip(&g.class_probs) {
                    *a += f64::from(*v);
                }
                losses[i] += f64::from(g.loss_value);
            }
            if mi == 0 {
                target = member.iter().map(|g| g.predicted_class).collect();
            }
        }
        let scale = self.models.len() as f64;
        Ok((0..batch)
            .map(|i| {
                let class_probs: Vec<f32> = probs[i * k..(i + 1) * k]
                    .iter()
                    .map(|v| (v / scale) as f32)
                    .collect();
                LossGradient {
                    wrt_input: Tensor::from_vec(
                        grad[i * n..(i + 1) * n]
                            .iter()
                            .map(|v| (v / scale) as f32)
                            .collect(),
                    ),
                    loss_value: (losses[i] / scale) as f32,
                    predicted_class: argmax(&class_probs),
                    class_probs,
                    target_class: target[i],
                }
            })
            .collect())
    }

    fn target_labels(&self, xs: &[f32]) -> Result<Vec<usize>> {
        self.original().target_labels(xs)
    }
}

/// On-disk description of an ensemble: member model files plus strategy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub strategy: String,
    /// Member model files, original first. Relative paths resolve against
    /// the manifest's directory.
    pub members: Vec<PathBuf>,
}

pub const SIMPLE_AVERAGE: &str = "simple_average";

impl EnsembleManifest {
    pub fn new(members: Vec<PathBuf>) -> Self {
        Self {
            strategy: SIMPLE_AVERAGE.into(),
            members,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text).map_err(|source| ModelIoError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ModelIoError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let manifest: Self =
            serde_json::from_str(&text).map_err(|e| ModelIoError::Header(e.to_string()))?;
        if manifest.strategy != SIMPLE_AVERAGE {
            return Err(Error::Config(format!(
                "unsupported ensemble strategy '{}'",
                manifest.strategy
            )));
        }
        Ok(manifest)
    }

    /// Loads every member model, resolving relative paths against `base`.
    pub fn build(&self, base: &Path) -> Result<EnsembleModel> {
        let models = self
            .members
            .iter()
            .map(|p| {
                nn::load(if p.is_absolute() {
                    p.clone()
                } else {
                    base.join(p)
                })
            })
            .collect::<Result<Vec<_>>>()?;
        EnsembleModel::from_members(models)
    }
}

/// Reads a manifest and loads its ensemble.
pub fn load_ensemble(path: impl AsRef<Path>) -> Result<EnsembleModel> {
    let path = path.as_ref();
    let manifest = EnsembleManifest::load(path)?;
    manifest.build(path.parent().unwrap_or(Path::new(".")))
}

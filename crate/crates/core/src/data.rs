use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Labeled image set held as one flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<f32>,
    labels: Vec<usize>,
    sample_shape: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Vec<f32>, labels: Vec<usize>, sample_shape: Vec<usize>) -> Result<Self> {
        let per: usize = sample_shape.iter().product();
        if per == 0 || images.len() != per * labels.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![labels.len(), per],
                got: vec![images.len()],
            });
        }
        Ok(Self {
            images,
            labels,
            sample_shape,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn images(&self) -> &[f32] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn sample(&self, i: usize) -> Tensor {
        Tensor::new(self.sample_shape.clone(), self.image(i).to_vec()).unwrap()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let n = self.sample_len();
        let mut images = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            images,
            labels,
            sample_shape: self.sample_shape.clone(),
        }
    }

    /// First `count` samples, in order.
    pub fn head(&self, count: usize) -> Dataset {
        let idx: Vec<usize> = (0..count.min(self.len())).collect();
        self.subset(&idx)
    }

    /// `count` distinct samples drawn uniformly with `seed`, kept in ascending index order.
    pub fn sample_subset(&self, count: usize, seed: u64) -> Dataset {
        let count = count.min(self.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = index::sample(&mut rng, self.len(), count).into_vec();
        idx.sort_unstable();
        self.subset(&idx)
    }

    /// Batch tensor of shape `[B, sample_shape..]`.
    pub fn batch_tensor(&self) -> Tensor {
        let mut shape = vec![self.len()];
        shape.extend_from_slice(&self.sample_shape);
        Tensor::new(shape, self.images.clone()).unwrap()
    }
}

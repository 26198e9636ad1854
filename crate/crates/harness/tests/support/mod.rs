//! Small synthetic MNIST-shaped fixtures.

#![allow(dead_code)]

use std::fs;
use std::path::Path;

use mutattack_core::nn::{LayerSpec, Network};
use mutattack_core::Dataset;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Linear 28×28 → 10 classifier with a hidden layer.
pub fn tiny_victim(seed: u64) -> Network {
    Network::random(
        vec![1, 28, 28],
        vec![
            LayerSpec::Flatten,
            LayerSpec::Dense {
                inputs: 784,
                outputs: 24,
            },
            LayerSpec::Relu,
            LayerSpec::Dense {
                inputs: 24,
                outputs: 10,
            },
        ],
        seed,
    )
    .unwrap()
}

/// `count` random byte images labeled by `net`, except every fourth label is shifted.
pub fn labeled_images(net: &Network, count: usize, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bytes: Vec<u8> = (0..count * 784).map(|_| rng.random()).collect();
    let pixels: Vec<f32> = bytes.iter().map(|&b| f32::from(b) / 255.0).collect();
    let pred = net
        .forward_batch(&mutattack_core::Tensor::new(vec![count, 1, 28, 28], pixels).unwrap())
        .unwrap()
        .predictions();
    let labels = pred
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            if i % 4 == 3 {
                ((p + 1) % 10) as u8
            } else {
                p as u8
            }
        })
        .collect();
    (bytes, labels)
}

pub fn dataset(net: &Network, count: usize, seed: u64) -> Dataset {
    let (bytes, labels) = labeled_images(net, count, seed);
    Dataset::new(
        bytes.iter().map(|&b| f32::from(b) / 255.0).collect(),
        labels.iter().map(|&l| usize::from(l)).collect(),
        vec![1, 28, 28],
    )
    .unwrap()
}

/// Writes `t10k-*` and `train-*` IDX files holding the same samples.
pub fn write_idx(dir: &Path, net: &Network, count: usize, seed: u64) {
    let (bytes, labels) = labeled_images(net, count, seed);
    let mut images = Vec::new();
    for v in [0x0803u32, count as u32, 28, 28] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    images.extend_from_slice(&bytes);
    let mut lab = Vec::new();
    for v in [0x0801u32, count as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend_from_slice(&labels);
    for prefix in ["t10k", "train"] {
        fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), &images).unwrap();
        fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), &lab).unwrap();
    }
}

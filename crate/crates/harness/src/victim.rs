//! Lenet victims trained on MNIST and cached on disk.

use std::fs;
use std::path::{Path, PathBuf};

use mutattack_core::nn::{self, train, LenetConfig, Network, TrainConfig};
use serde_json::json;

use crate::error::{io_error, Result};
use crate::idx::{load_dataset, Split};

/// Training temperature of the gradient-masking victim.
pub const MASKING_TEMPERATURE: f32 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VictimSpec {
    pub temperature: f32,
    pub epochs: usize,
    pub init_seed: u64,
    pub train_seed: u64,
}

impl VictimSpec {
    pub fn unmasked() -> Self {
        Self {
            temperature: 1.0,
            epochs: 5,
            init_seed: 1,
            train_seed: 0,
        }
    }

    /// Trained at temperature 100, evaluated at temperature 1.
    pub fn masked() -> Self {
        Self {
            temperature: MASKING_TEMPERATURE,
            ..Self::unmasked()
        }
    }

    pub fn file_name(&self) -> String {
        format!(
            "lenet5-t{}-e{}-i{}-s{}.mutn",
            self.temperature, self.epochs, self.init_seed, self.train_seed
        )
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            temperature: self.temperature,
            seed: self.train_seed,
            ..TrainConfig::default()
        }
    }
}

/// Trains a fresh Lenet on the MNIST files in `data_dir`.
pub fn train_victim(data_dir: &Path, spec: &VictimSpec) -> Result<Network> {
    let train_set = load_dataset(data_dir, Split::Train)?;
    let test_set = load_dataset(data_dir, Split::Test)?;
    let init = Network::lenet5(LenetConfig::default(), spec.init_seed)?;
    let (mut model, _) = train(&init, &train_set, &test_set, &spec.train_config())?;
    model
        .metadata_mut()
        .insert("victim".into(), json!({ "init_seed": spec.init_seed }));
    Ok(model)
}

pub fn victim_path(cache_dir: &Path, spec: &VictimSpec) -> PathBuf {
    cache_dir.join(spec.file_name())
}

/// Loads the victim for `spec` from `cache_dir`, training and saving it first if absent.
pub fn cached_victim(cache_dir: &Path, data_dir: &Path, spec: &VictimSpec) -> Result<Network> {
    let path = victim_path(cache_dir, spec);
    if path.is_file() {
        return Ok(nn::load(&path)?);
    }
    let model = train_victim(data_dir, spec)?;
    fs::create_dir_all(cache_dir).map_err(io_error(cache_dir))?;
    nn::save(&model, &path)?;
    Ok(model)
}

//! Experiment harness: MNIST loading, victim training, attack sweeps and CSV output.

pub mod error;
pub mod experiment;
pub mod gradmap;
pub mod idx;
pub mod victim;

pub use error::{HarnessError, Result};
pub use experiment::{
    run_experiment, AttackGrid, Experiment, ExperimentOutput, ExperimentPlan, MutantMode,
    SuccessRateRecord,
};

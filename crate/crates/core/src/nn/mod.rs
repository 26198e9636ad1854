//! Small feedforward network engine: forward pass, exact input and weight
//! gradients, training, and the binary model container.

pub mod io;
mod layer;
mod network;
mod ops;
pub mod train;

pub use io::{load, save};
pub use layer::{Layer, LayerSpec};
pub use network::{
    BatchOutput, ForwardOutput, LenetConfig, LossGradient, LossKind, Network, WeightGradients,
};
pub use train::{train, Optimizer, TrainConfig, TrainReport};

//! Trainable networks built from kernel point convolutions.

pub mod blocks;
pub mod checkpoint;
mod config;
pub mod layers;
pub mod model;
pub mod optim;

pub use config::{validate_layer_chain, LayerConfig};
pub use model::{element_labels, Network, NetworkSpec, Task};
pub use optim::{MomentumSgd, Schedule, StepStats, TrainState};

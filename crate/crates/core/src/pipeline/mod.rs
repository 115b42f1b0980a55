//! Data pipeline: synthetic datasets, augmentation, training and evaluation
//! drivers, sliding-sphere scene segmentation, receptive-field and
//! activation exports.

pub mod activations;
pub mod augment;
pub mod config;
pub mod erf;
pub mod segment;
pub mod synth;
pub mod trainer;

pub use augment::{add_input_features, augment, AugmentationConfig, FeatureMode};
pub use config::RunConfig;
pub use erf::{compute_erf, receptive_bound, ErfResult};
pub use segment::{segment_scene, softmax_rows, VoteAccumulator};
pub use synth::{generate_synthetic_dataset, SyntheticKind};
pub use trainer::{derive_seed, evaluate, prepare_cloud, train, TrainOutcome};

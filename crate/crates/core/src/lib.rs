//! Kernel point convolution for point clouds.
//!
//! The crate covers the full path from raw points to trainable networks:
//!
//! - [`geometry`]: grid subsampling, radius neighborhoods, sphere extraction
//!   and variable-size batching,
//! - [`kernel_points`]: regular kernel dispositions by energy minimization,
//! - [`conv`]: rigid and deformable kernel point convolution with analytic
//!   gradients and the deformable regularization losses,
//! - [`network`]: bottleneck blocks, classification and segmentation
//!   networks, momentum SGD and checkpointing,
//! - [`pipeline`]: synthetic datasets, augmentation, training drivers,
//!   sliding-sphere scene segmentation, receptive-field and activation
//!   exports,
//! - [`ply`] / [`fixture`]: ASCII PLY and binary fixture formats.

pub mod conv;
pub mod error;
pub mod fixture;
pub mod geometry;
pub mod kernel_points;
pub mod math;
pub mod network;
pub mod pipeline;
pub mod ply;
pub mod selftest;

pub use error::{KpError, Result};

//! A self-contained CPU micro deep-learning engine for binary medical-image
//! segmentation with a parameter-reduced U-Net.
//!
//! The crate provides, from scratch: dense NCHW tensors with forward and
//! backward kernels for the fixed op set a U-Net needs ([`ops`]), the
//! configurable encoder/decoder graph with parameter and FLOP accounting
//! ([`model`]), dice metrics, losses, Adam and the training loop ([`train`]),
//! dataset manifests, PGM rasters and a synthetic sample generator ([`data`]),
//! bit-exact weight-file persistence ([`serialize`]), and latency/width-sweep
//! benchmarking ([`bench`]).
//!
//! Everything is deterministic given a seed: identical inputs produce
//! bitwise-identical outputs, independent of worker-thread count.

pub mod bench;
pub mod data;
pub mod error;
pub mod model;
pub mod ops;
pub mod pgm;
pub mod serialize;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{build_unet, count_flops, count_parameters, Model, ModelConfig};
pub use ops::Mode;
pub use tensor::Tensor;

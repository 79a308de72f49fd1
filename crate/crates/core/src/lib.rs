//! Forward inference for small convolutional (and CNN+LSTM) networks plus
//! evidence backtracking: starting from a chosen output neuron, the library
//! traces positively contributing activations layer by layer back onto the
//! input pixels, then turns those fixation points into heat maps, bounding
//! boxes and localization metrics.
//!
//! The crate is organized along the pipeline:
//!
//! - [`tensor`]: dense f32 tensors and the forward kernels
//! - [`graph`]: manifest-described networks and weight loading
//! - [`forward`]: a recording forward pass ([`forward::ActivationTrace`])
//! - [`backtrack`]: per-layer evidence tracing down to the image
//! - [`postprocess`]: outlier removal, heat maps, bounding boxes
//! - [`eval`]: IoU, localization error, EER precision, proposal metrics
//! - [`fixtures`]: deterministic synthetic models and brute-force oracles
//!
//! Everything is pure and deterministic: a forward pass records an immutable
//! trace, and backtracking only reads it.

// index-heavy numeric kernels read better with explicit loop indices
#![allow(clippy::needless_range_loop)]

pub mod backtrack;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod forward;
pub mod graph;
pub mod imageio;
pub mod postprocess;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{load_model, NetworkGraph};
pub use tensor::{ConvParams, Tensor};

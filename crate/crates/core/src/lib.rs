//! Bimodal connection attention fusion (BCAF) for audio/text emotion recognition.
//!
//! The crate operates on precomputed utterance-level feature vectors, one per
//! modality, grouped into conversations. It contains:
//!
//! - [`tensor`]: a small dense tensor with reverse-mode differentiation, Adam
//!   and a portable seeded RNG.
//! - [`data`]: the binary feature-file format, JSON-lines manifests, padded
//!   batching and a synthetic bimodal dataset generator.
//! - [`model`]: the interactive connection network, the bimodal attention
//!   network, the correlative attention network and the classification heads.
//! - [`train`]: the composite objective, training with early stopping,
//!   metrics, gradient checking, and the ablation/variant harness.
//!
//! Work that is embarrassingly parallel (matrix rows, finite-difference
//! probes, independent training runs) goes through [`Exec`], which uses rayon
//! when the `parallel` feature is enabled and runs sequentially otherwise.

pub mod data;
pub mod error;
pub mod exec;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, FormatError, Result};
pub use exec::Exec;
pub use params::ParamStore;
pub use tensor::{Graph, RngState, Scalar, Tensor, Var};

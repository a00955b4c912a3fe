//! UniMixer mixing blocks for ranking models.
//!
//! - [`tensor`]: row-major matrices, reshapes, Kronecker products.
//! - [`reference`]: TokenMixer, attention, FM and Wukong reference layers.
//! - [`sinkhorn`]: temperature Sinkhorn projection onto doubly stochastic matrices.
//! - [`mixing`]: UniMixing and UniMixing-Lite maps, naive and optimized.
//! - [`model`]: tokenizer, SiameseNorm blocks, per-token SwiGLU, forward graph.
//! - [`graph`]: reverse-mode autodiff used for training.
//! - [`train`]: synthetic data, Adam, temperature schedules, metrics, gradient checks.
//! - [`scaling`]: parameter and FLOP accounting, sweeps, power-law fits, reports.
//! - [`verify`]: the self-check suite behind `unimixer verify`.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod graph;
pub mod mixing;
pub mod model;
pub mod reference;
pub mod scaling;
pub mod sinkhorn;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Matrix, Vector};

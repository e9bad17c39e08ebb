//! Robust training of small quantized neural networks.
//!
//! The crate combines four ingredients that are usually studied in
//! isolation:
//!
//! * a reverse-mode autodiff tape over dense `f64` tensors ([`tape`]),
//! * weight quantization by relaxed projection with a geometric blend
//!   schedule ([`quant`]),
//! * gradient-based adversarial attacks and the training losses built on
//!   them ([`attack`], [`train`]),
//! * sparsity accounting, channel pruning, and exhaustively checked risk
//!   inequalities for one-dimensional toy models ([`sparsity`], [`theory`]).
//!
//! Everything is deterministic given a seed: RNG streams are derived per
//! purpose ([`rng`]), datasets and checkpoints round-trip bit for bit
//! ([`data`], [`checkpoint`]), and repeated runs produce identical metrics.
//!
//! Start with the `examples/` directory; each file exercises one capability
//! end to end.

pub mod attack;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod nets;
pub mod quant;
pub mod rng;
pub mod sparsity;
pub mod tape;
pub mod tensor;
pub mod theory;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;

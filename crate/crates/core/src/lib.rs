//! Intra-layer mixed-scheme, multi-precision DNN quantization.
//!
//! Every filter (row of a layer's weight matrix) is independently assigned a
//! quantization scheme and bit-width: power-of-two 4-bit, fixed-point 4-bit,
//! or fixed-point 8-bit. The split is driven by per-filter Hessian
//! sensitivity (largest eigenvalue picks the 8-bit rows) and weight variance
//! (low-variance rows go to power-of-two), under a layer-uniform ratio such
//! as 60:35:5 chosen offline from a hardware throughput model.
//!
//! The crate covers the full pipeline at desk scale:
//!
//! - [`quant`] — scalar/row quantizer kernels and the PoT codebook
//! - [`assignment`] — Hessian-vector products, power iteration,
//!   largest-remainder apportionment, and the two-step row assignment
//! - [`nn`] / [`train`] — a minimal reverse-mode engine and the
//!   quantization-aware training loop (straight-through estimator)
//! - [`engine`] — bit-exact integer inference with a shift-add kernel for
//!   PoT rows and a multiply kernel for fixed rows
//! - [`hw`] — an analytic dual-engine (LUT/DSP) throughput model,
//!   calibration from measured latencies, and offline ratio search

pub mod assignment;
pub mod data;
pub mod engine;
pub mod error;
pub mod hw;
pub mod nn;
pub mod quant;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;

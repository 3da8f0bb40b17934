//! Bit-packed inference engine for binarized neural networks.
//!
//! Activations and weights are constrained to ±1 and stored one bit per
//! value (bit 1 encodes +1, bit 0 encodes -1). Dot products become
//! `n - 2 * popcount(a ^ b)`, which every kernel in this crate builds on.
//!
//! Layout of the crate:
//!
//! - [`bitcore`]: packed bit storage, sign binarization, the ±1 dot product
//!   and the fixed-stride-bit (FSB) tiled layout.
//! - [`bmm`]: bit matrix multiplication kernels (naive, cache-blocked, FSB).
//! - [`bconv`]: padding-aware bit convolution over HWNC activations, OR
//!   pooling and the real-valued first layer.
//! - [`nn`]: batch-norm folding, model and weight formats, and the inference
//!   pipeline.
//! - [`oracle`]: an unpacked floating-point reference used by the test
//!   suites and by the benchmark correctness pre-checks.
//! - [`bench`] and [`cli`]: the benchmark harness and command-line surface.

pub mod bconv;
pub mod bench;
pub mod bitcore;
pub mod bmm;
pub mod cli;
mod error;
pub mod nn;
pub mod oracle;

pub use error::{Error, Result};

//! Ultra-low-bit quantization toolkit.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense `f64` tensors used as the full-precision substrate.
//! - [`quant`]: group-wise asymmetric quantizer with closed-form scale and
//!   zero-point, the symmetric half-integer (SEQ) variant and the per-group
//!   error bound.
//! - [`nested`]: master codes that serve any lower bit-width by right-shift.
//! - [`mx`]: E4M3 scale codec, bit packing and the `BBQT` container.
//! - [`ocs`]: outlier channel splitting with the rounding-aware split.
//! - [`kernels`]: portable packed GEMV (W2A2 integer, W2A16 dequant-on-the-fly).
//! - [`qat`]: a tiny multi-block MLP trained with STE fake quantization under
//!   progressive and curriculum bit schedules, plus a loss-landscape probe.
//! - [`cli`]: the `lowbit` command-line front end.

pub mod cli;
pub mod error;
pub mod kernels;
pub mod mx;
pub mod nested;
pub mod ocs;
pub mod qat;
pub mod quant;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

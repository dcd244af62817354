//! Fixed-point quantization-aware training and integer-only inference.
//!
//! The crate is `no_std` (it needs `alloc`) and contains only pure
//! computation: a small dense tensor engine with reverse-mode gradients for
//! CNN layers, a power-of-two fixed-point quantizer, activation range
//! calibration, the quantized training engine with straight-through
//! gradients, optimizer and schedule arithmetic, training-noise diagnostics,
//! and a lowering pass to a pure-integer model.
//!
//! File formats, dataset readers and the command line live in the `faq`
//! crate.
#![no_std]
// the test harness links std, whose inherent float methods shadow `Float`
#![cfg_attr(test, allow(unused_imports))]

extern crate alloc;

pub mod calibrate;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod graph;
pub mod int_infer;
pub mod layers;
pub mod models;
pub mod optim;
pub mod qat;
pub mod quant;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Mode, Network, NetworkBuilder};
pub use layers::LayerDef;
pub use qat::{PrecisionPolicy, QuantNet};
pub use quant::QuantSpec;
pub use scalar::Scalar;
pub use tensor::Tensor;

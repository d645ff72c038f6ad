//! Style normalization and restitution feature modules, the dual
//! entropy-comparison losses they are trained with, and a desk-scale
//! domain-generalization harness, built on a small reverse-mode autodiff
//! core.
//!
//! The crate is organized as a library; `examples/` holds one runnable
//! program per capability, and the `snr` binary exposes the same
//! functionality as subcommands.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod linalg;
pub mod loss;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod snr;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Graph, Tensor, TensorData};

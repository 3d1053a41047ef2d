//! Heterogeneous generative knowledge distillation at desk scale.
//!
//! A sparse-convolution UNet student learns the token features and
//! memory-queue similarity structure of a frozen transformer teacher that
//! only sees the visible patches of each masked image.

pub mod cli;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod losses;
pub mod manifest;
pub mod masking;
pub mod ntnsr;
pub mod ops;
pub mod optim;
pub mod params;
pub mod probe;
pub mod queue;
pub mod sparse;
pub mod student;
pub mod tape;
pub mod teacher;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tape::{ParamId, Tape, Var};
pub use tensor::Tensor;

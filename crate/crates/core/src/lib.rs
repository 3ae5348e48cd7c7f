//! Numerical building blocks for GC ViT (local and global window attention
//! with a stage-shared global query) and the MambaVision mixer, with analytic
//! cost models and gradient verification.

pub mod attention;
pub mod blocks;
pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod io;
pub mod mamba;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod windowing;

pub use error::{Error, Result};
pub use tensor::{DType, Element, Tensor, Var};

//! Task-adapted tomographic reconstruction.

mod kernels;
pub mod checks;
pub mod config;
pub mod data;
pub mod experiment;
pub mod gradcheck;
pub mod params;
pub mod real;
pub mod recon;
pub mod report;
pub mod tape;
pub mod task;
pub mod tensor;
pub mod theory;
pub mod tomography;
pub mod train;

pub use params::ParamSet;
pub use real::{DType, Real};
pub use tape::{Bound, LinearOp, Tape, Var};
pub use tensor::{Tensor, TensorError};

//! Attention-aggregation feature pyramid operators.

pub mod analysis;
pub mod cli;
pub mod error;
pub mod fusion;
pub mod io;
pub mod level;
pub mod mgc;
pub mod nn;
pub mod params;
pub mod pyramid;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use params::{ConvParams, LinearParams, ParamSet};
pub use tensor::{DType, Scalar, Tensor};

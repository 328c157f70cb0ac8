//! Multi-scale hybrid state-space / local-attention time-series forecasting.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod lwt;
pub mod mamba;
pub mod model;
pub mod memory;
pub mod nn;
pub mod patch;
pub mod scaling;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, ParamId, ParamStore, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};

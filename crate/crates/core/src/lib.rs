//! Token-conditioned UNet segmentation over frozen vision-transformer
//! features, with the fixed-head baselines it is compared against, a
//! synthetic volumetric dataset, a deterministic trainer and a CLI.

// `!(x >= 0.0)` is how validation rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod baselines;
pub mod conditioning;
pub mod config;
pub mod data;
pub mod error;
pub mod io;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod pixel_decoder;
pub mod report;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

//! ICA-UNet: an encoder/decoder pair that mimics ICA unmixing and mixing
//! around a U-Net backbone, for low-latency segmentation of volumetric cine
//! sequences.

pub mod autodiff;
pub mod config;
pub mod data;
mod binio;
pub mod error;
pub mod gradcheck;
pub mod ica;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod sched;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::{Real, Tensor};

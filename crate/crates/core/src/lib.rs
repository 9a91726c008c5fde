//! Learnable Gabor texture features for fine-grained recognition.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); training and
//! gradient checking use `f64`.

pub mod autodiff;
pub mod checks;
pub mod config;
pub mod data;
pub mod error;
pub mod gabor;
pub mod gate;
pub mod network;
pub mod oracle;
pub mod params;
pub mod scalar;
pub mod stats;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = autodiff::Tensor<f64>;
pub type Tape64 = autodiff::Tape<f64>;
pub type FilterBank64 = gabor::FilterBank<f64>;
pub type Model64 = network::Model<f64>;

//! Asymmetric RGB-DSM semantic segmentation on a from-scratch autodiff substrate.

pub mod alignment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod fuser;
pub mod gradcheck;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod profile;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

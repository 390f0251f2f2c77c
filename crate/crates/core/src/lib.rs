//! Deep generative models over a small reverse-mode autodiff core.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod contour;
pub mod error;
pub mod eval;
pub mod kv;
pub mod models;
pub mod nn;
pub mod tabular;
pub mod tensor;

pub use error::{Error, Result};

//! Gradient estimators for models with binary and categorical latent variables.

pub mod autodiff;
pub mod error;
pub mod estimators;
pub mod models;
pub mod optim;
pub mod oracles;
pub mod reparam;
pub mod rng;

pub use error::{Error, Result};

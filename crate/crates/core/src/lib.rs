pub mod autodiff;
pub mod baselines;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod features;
pub mod metrics;
pub mod microstructure;
pub mod net;
pub mod rng;
pub mod scene;
pub mod signal;

pub use error::{Error, Result};

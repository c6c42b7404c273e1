pub mod error;
pub mod experiment;
pub mod baselines;
pub mod feature;
pub mod io;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod synth;

pub use error::{Error, Result};

pub mod arch;
pub mod autodiff;
pub mod config;
pub mod datasets;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod params;
pub mod recipes;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod types;
pub mod vae;

pub use error::{Error, Result};

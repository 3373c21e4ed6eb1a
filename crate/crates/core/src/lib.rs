//! Deep Gaussian process inference with three variational schemes.

pub mod autodiff;
pub mod chained;
pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod estimate;
pub mod experiments;
pub mod layers;
pub mod linalg;
pub mod math;
pub mod joint;
pub mod meanfield;
pub mod params;
pub mod scheme;
pub mod training;

pub use error::{DgpError, Result};

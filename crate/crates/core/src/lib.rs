//! Multivariable Mendelian randomization from summary statistics with
//! pairwise-fusion penalties that group risk factors with shared signals.

pub mod error;
pub mod estimators;
pub mod grouping;
pub mod matrix_core;
pub mod model_selection;
pub mod simulation;
pub mod summary_data;
pub mod thinning;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

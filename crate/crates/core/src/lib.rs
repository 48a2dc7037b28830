pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod topk;
pub mod training;

pub use error::{Error, Result};

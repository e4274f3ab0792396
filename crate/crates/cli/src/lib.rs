pub mod commands;
pub mod config;
pub mod error;
pub mod metrics;

pub use config::{Mode, RunConfig};
pub use error::{CliError, Result};

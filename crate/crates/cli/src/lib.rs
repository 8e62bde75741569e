//! File formats and subcommands of the `reftrack` tool.

pub mod checkpoint;
pub mod clipio;
pub mod commands;
pub mod container;
pub mod error;
pub mod figures;

pub use error::{CliError, Result};

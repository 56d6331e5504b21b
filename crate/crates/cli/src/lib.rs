// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line front end and HTTP service for `crp-core`.

pub mod analysis;
pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod server;

pub use cli::Cli;
pub use commands::run;
pub use error::{CliError, CliResult};

//! Std companion to `kveff-core`: JSON run configuration, trace / sweep /
//! bench file formats, the wall-clock attention benchmark and the `kveff`
//! command-line front end.

pub mod bench;
pub mod cli;
pub mod config;
pub mod error;
pub mod formats;

pub use config::RunConfig;
pub use error::CliError;

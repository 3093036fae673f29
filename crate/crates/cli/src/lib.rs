//! Command-line front end and annotation service.

pub mod cli;
pub mod commands;
pub mod error;
pub mod service;
pub mod session;

pub use error::{CliError, ServiceError};

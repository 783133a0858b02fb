//! Command-line front end: scenario configs, experiment dispatch and reporting.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

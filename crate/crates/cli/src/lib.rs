//! Command-line front end: config handling and the command implementations.

pub mod commands;
pub mod config;

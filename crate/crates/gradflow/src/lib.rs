//! Configuration, file formats and command line for `gradflow-core`.

pub mod cli;
pub mod commands;
pub mod config;
pub mod output;

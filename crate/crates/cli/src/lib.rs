//! Configuration and error types shared by the `dlens` binary.

pub mod config;
pub mod error;

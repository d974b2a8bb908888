//! HTTP service, client and command-line front end of the model runner.

pub mod cli;
pub mod client;
pub mod config;
pub mod http;

//! Configuration, subcommand bodies and the HTTP job service.

pub mod commands;
pub mod config;
pub mod context;
pub mod jobs;
pub mod run;
pub mod service;

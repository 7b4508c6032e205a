//! Experiment orchestration behind the `lacvis` binary.

pub mod commands;
pub mod config;
pub mod pipeline;
pub mod report;
pub mod verify;

//! Operator tooling for the orchestration kernel: the `orchestra` command
//! line and the HTTP gateway it serves.

pub mod commands;
pub mod config;
pub mod gateway;

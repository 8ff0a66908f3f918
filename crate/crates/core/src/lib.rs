//! Orchestration kernel for compound AI systems. Agents, data sources and
//! planners communicate only through tagged append-only streams.

pub mod builtins;
pub mod coordinator;
pub mod dataplan;
pub mod kernel;
pub mod model;
pub mod optimizer;
pub mod planner;
pub mod registry;
pub mod runtime;
pub mod scenario;
pub mod seeds;
pub mod session;
pub mod stream;
pub mod transcript;
pub mod value;

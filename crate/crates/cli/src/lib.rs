//! Library surface of the experiment CLI: configuration schema, scenario
//! construction, manifests, and the command implementations.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod scenario;

//! Library side of the `deeptail` command: typed configs, run manifests and
//! the command implementations, so they can be driven from tests.

pub mod commands;
pub mod config;
pub mod manifest;

pub use commands::{replay, run, Invocation, ModelSource};
pub use manifest::RunManifest;

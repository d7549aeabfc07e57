//! Orchestration of the collaborative grasping pipeline: artifact I/O, the
//! `collab` subcommands, run records and the randomized benchmark.

pub mod bench;
pub mod commands;
pub mod error;
pub mod image;
pub mod io;
pub mod pipeline;
pub mod plot;
pub mod record;

pub use collab_core;
pub use error::{CliError, ErrorCategory, FailureCategory};
pub use record::{RunRecord, StageTimings};

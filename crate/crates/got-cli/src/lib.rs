//! Experiment harness over `got-core`: schema-validated JSON configs in,
//! CSV/SVG artifacts and console summaries out.
//!
//! Every command is deterministic given its config and seed; artifacts are
//! staged in memory and written atomically (write-to-temp plus rename) once
//! the run has succeeded. All randomness flows through seeded ChaCha
//! streams recorded in the artifact headers.

pub mod commands;
pub mod config;
pub mod networks;
pub mod report;
pub mod svg;

pub use config::{CliError, CliResult};

//! Files, experiments and the command line around `clockwork-core`.
//!
//! - [`cwkt`]: the binary tensor format.
//! - [`container`]: sequence directories (frames, labels, manifest).
//! - [`bundle`]: weight bundles for staged networks.
//! - [`config`]: experiment configuration files.
//! - [`experiment`]: running schedules, sweeps and profiles over sequences.
//! - [`report`]: CSV and JSON output.

pub mod bundle;
pub mod config;
pub mod container;
pub mod cwkt;
pub mod error;
pub mod experiment;
pub mod report;

pub use error::{CwkError, Result};

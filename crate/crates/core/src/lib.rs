//! Clockwork execution of staged fully convolutional networks over frame
//! sequences.
//!
//! A staged network is split into stages, each emitting features for the
//! next stage and a score map for skip fusion. Clocks decide which stages
//! execute on a given frame; stages that do not execute contribute their
//! cached scores, so fusion on every frame acts as a temporal skip
//! connection. The crate covers:
//!
//! - [`tensor`]: the small deterministic kernel set (conv, pool, relu,
//!   bilinear upsampling, argmax).
//! - [`clockwork`]: clocks and the generalized clockwork state machine with
//!   the SRN, clockwork RN, and clockwork FCN presets.
//! - [`stagenet`]: staged networks, fusion, seeded initialization, and the
//!   procedural segmenter used for exact accuracy experiments.
//! - [`schedules`]: oracle, truncated, pipelined, fixed-rate, and adaptive
//!   executors with analytic cost and latency accounting.
//! - [`metrics`]: label-change distance, confusion matrices, mean IU,
//!   frequency-weighted IU, boundary bands, and temporal profiles.
//! - [`data`]: translated crop sequences and procedural labeled scenes.
//!
//! The crate is `no_std` with `alloc`; the `std` feature only adds
//! `std::error::Error` plumbing.

#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod clockwork;
pub mod data;
pub mod error;
pub mod metrics;
pub mod schedules;
pub mod stagenet;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Label, LabelMap, Tensor, IGNORE_LABEL};

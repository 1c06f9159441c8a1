//! File formats, drivers and the command line around `nue-core`: PCM16 WAV
//! I/O, JSON Lines manifests, synthetic corpora, binary checkpoints, run
//! configs and evaluation reports.

pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod report;
pub mod runconfig;
pub mod wav;

pub use error::{AsrError, Result};

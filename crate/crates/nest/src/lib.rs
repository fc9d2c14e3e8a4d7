//! File formats, audio IO, run configuration and the `nest` command line
//! around [`nest_core`].

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audio;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod manifest;
pub mod run;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use config::{ConfigValidationError, RunConfig};
pub use manifest::{make_batches, Manifest, ManifestEntry, ManifestError};

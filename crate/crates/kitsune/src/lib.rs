//! File formats, experiment drivers and the `kitsune` command line on top
//! of [`kitsune_core`].

pub mod cli;
pub mod error;
pub mod harness;
pub mod io;
pub mod report;

pub use error::{CliError, Result};
pub use kitsune_core as core;

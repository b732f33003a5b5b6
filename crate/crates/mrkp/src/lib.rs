//! File formats, checkpoints, run manifests and the command-line front end
//! for [`mrkp_core`].

pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod io;
pub mod manifest;
pub mod report;

pub use error::{Error, Result};

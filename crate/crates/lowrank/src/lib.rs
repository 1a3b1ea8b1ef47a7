//! Calibration, compression and benchmarking around `lowrank-core`, with
//! safetensors/JSON file formats and the `lowrank` command-line tool.

pub mod bench;
pub mod calibration;
pub mod cli;
pub mod error;
pub mod io;
pub mod manifest;
pub mod report;
pub mod synthetic;
pub mod tensors;

pub use error::{Error, Result};

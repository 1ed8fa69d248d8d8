//! File formats, checkpoints, reports and the command line around
//! [`gazeprophet_core`].

pub mod atomic;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod ppm;
pub mod report;

pub use error::{Error, Result};

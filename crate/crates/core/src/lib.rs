//! Multi-modal gaze prediction for 360° equirectangular scenes.
//!
//! The crate is `no_std` (with `alloc`) and holds every numeric piece of the
//! predictor: a small reverse-mode autodiff [`tensor`] engine, spherical
//! geometry helpers, the spherical vision transformer, the LSTM temporal
//! encoder, adaptive fusion with its two prediction heads, the synthetic
//! scene/scanpath generator, Adam training, evaluation metrics and the paired
//! statistics used to compare models.
//!
//! File formats, checkpoints and the command line live in the `gazeprophet`
//! companion crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradcheck;
pub mod init;
mod math;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod sphere;
pub mod stats;
pub mod temporal;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
pub use model::{BaselineKind, Model, ModelDims, Prediction};
pub use tensor::{Gradients, Tape, Tensor, Var};

//! Multiscale adversarial domain adaptation for a miniature grid-based
//! object detector.
//!
//! The crate trains a three-scale single-stage detector on a synthetic
//! clear-weather dataset while per-scale domain classifiers, attached to the
//! backbone through gradient reversal, push the backbone features toward
//! domain invariance against a foggy target set. Everything runs on the CPU
//! on top of a small reverse-mode autodiff engine; no external ML framework
//! is involved.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod train;

pub use error::{Error, Result};

//! Badminton rally analytics: a shot-level event language, a dual-CNN /
//! BiGRU / attention win-probability model trained with a small reverse-mode
//! differentiation engine, evaluation metrics, and attention-based shot
//! influence reports.

pub mod autodiff;
pub mod blsr;
pub mod encoder;
mod error;
pub mod influence;
pub mod model;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};

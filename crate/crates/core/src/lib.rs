//! Childhood myopia progression prediction from longitudinal fundus images.

pub mod cohort;
pub mod domain;
pub mod error;
pub mod eval;
pub mod explain;
pub mod imaging;
pub mod mmpn;
pub mod seeding;
pub mod synth;

pub use error::{Error, ErrorClass, Result};

//! Unified age progression and regression with attention-guided cyclic
//! conditional GANs.
//!
//! The crate trains a pair of dedicated generators — an age progressor and an
//! age regressor — against patch discriminators that carry auxiliary
//! age-regression heads. A spatial attention branch in each generator limits
//! edits to age-relevant regions, and a procedural synthetic-face corpus with
//! a known aging operator provides quantitative verification at desk scale.

pub mod data;
pub mod discriminator;
pub mod error;
pub mod eval;
pub mod generator;
pub mod losses;
pub mod nn;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};

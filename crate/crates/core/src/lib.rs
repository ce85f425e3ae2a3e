//! Contrastive relationship denoise distillation (CRDND).
//!
//! Trains a small student network to inherit adversarial robustness from a frozen teacher.
//! The student's predictions pass through per-scenario noise matrices built from the
//! teacher's measured per-class accuracy, and are matched to the teacher with contrastive
//! relationship losses over a pooled batch of natural and adversarial examples.

pub mod attacks;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod noise;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

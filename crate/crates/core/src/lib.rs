//! Hierarchical windowed-attention speech encoder.
//!
//! A four-stage encoder (frame, phoneme, word, utterance) whose attention
//! windows and merge factors come from typical speech unit durations, a
//! plain Transformer baseline, a parameter/FLOPs analyzer, and a small
//! reverse-mode tape used to verify gradients by finite differences.

pub mod attention;
pub mod autodiff;
pub mod checks;
pub mod complexity;
pub mod error;
pub mod formats;
pub mod model;
pub mod structure;
pub mod tensor;

pub use error::{Error, Result};

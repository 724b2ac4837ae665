//! Curriculum self-training for source-free domain adaptation.
//!
//! A compact, CPU-only implementation of the full pipeline: a source model
//! is trained on labeled data, then adapted to an unlabeled shifted domain
//! using augmentation-averaged pseudo-labels from an EMA teacher, a
//! reliability split of each batch, and a scheduled mix of cross-entropy,
//! label propagation, and contrastive objectives. Everything runs on f64
//! dense tensors with a small reverse-mode autodiff engine; runs are
//! deterministic for a fixed seed.

pub mod data;
pub mod engine;
pub mod error;
pub mod model;
pub mod numkit;
pub mod objective;
pub mod select;
pub mod teacher;

pub use error::{Error, Result};

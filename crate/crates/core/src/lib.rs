//! Unsupervised OCR post-correction.
//!
//! Clean text is corrupted synthetically (random edits or a learned GRU
//! generator), a character-level transformer learns to undo the damage from
//! windows of surrounding words, and corrected OCR output is scored word by
//! word against aligned ground truth.

pub mod corpus;
pub mod embedding;
pub mod encoding;
pub mod error;
pub mod errorgen;
pub mod eval;
pub mod lexicon;
pub mod models;
pub mod pairgen;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};

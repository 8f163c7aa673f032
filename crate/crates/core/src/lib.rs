//! Training and evaluation harness for length generalization of small
//! decoder-only transformers on decimal addition.
//!
//! The crate is organised bottom-up: [`numerics`] (tensors and reverse-mode
//! autodiff), [`posenc`] (positional encodings), [`datagen`] (addition data),
//! [`model`] (the transformer), [`trainer`] (AdamW, schedule, checkpoints),
//! [`evalkit`] (greedy decoding and error analysis) and [`harness`]
//! (configuration, runs, sweeps and plots).

pub mod datagen;
pub mod error;
pub mod evalkit;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod posenc;
pub mod trainer;

pub use error::{Error, Result};

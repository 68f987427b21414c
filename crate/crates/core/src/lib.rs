//! Desk-scale brain-signal-to-text decoding toolkit.
//!
//! The crate covers the full pipeline: a minimal reverse-mode tensor core
//! ([`numerics`]), sentence-aligned recording data model and synthesis
//! ([`signals`]), character/phoneme tokenizers ([`tokenizers`]), CTC loss and
//! decoding ([`ctc`]), three encoder families ([`encoders`]), self-supervised
//! pretraining objectives ([`pretrain`]), a supervised training loop with
//! failure diagnostics ([`trainer`]), text metrics ([`metrics`]), and an
//! experiment grid runner ([`harness`]).

pub mod ctc;
pub mod encoders;
mod error;
pub mod harness;
pub mod metrics;
pub mod numerics;
pub mod pretrain;
pub mod signals;
pub mod tokenizers;
pub mod trainer;

pub use error::{Error, Result};

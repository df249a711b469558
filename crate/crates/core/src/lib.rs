//! Joint intent classification and IOB slot tagging, trained from scratch.
//!
//! The crate ingests ATIS-style corpora, builds per-token inputs from
//! frozen word vectors, a character CNN, and surface-form flags, and trains
//! one of two joint architectures on its own reverse-mode differentiation
//! kernel: a bidirectional LSTM tagger, or a feed-forward network applied
//! independently at every timestep. Evaluation reports intent accuracy and
//! entity-level (conlleval-style) F1.

pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod embeddings;
pub mod error;
pub mod eval;
pub mod features;
pub mod model;
pub mod train;

pub use error::{Error, Result};

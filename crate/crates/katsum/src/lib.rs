//! Knowledge-aware abstractive text summarization.
//!
//! The pipeline extracts subject-relation-object triplets from documents,
//! embeds them with a translation-based knowledge-graph model, scores each
//! triplet's summary-worthiness with a sigmoid classifier, and feeds the
//! selected triplet embeddings into the decoder of an encoder-decoder
//! summarizer as extra cross-attention memory. Training uses per-group Adam
//! optimizers with inverse-square-root warmup schedules; evaluation reports
//! ROUGE-1/2/L.

pub mod autodiff;
pub mod config;
pub mod corpus;
pub mod error;
pub mod fixture;
pub mod kg;
pub mod model;
pub mod pipeline;
pub mod rouge;
pub mod select;
pub mod training;
pub mod triplet;

pub use error::{Error, Result};

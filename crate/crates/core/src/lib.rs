//! Recurrent question answering over precomputed image features.
//!
//! Questions are fed word by word into a single-layer LSTM, with the image
//! feature vector concatenated to every input. Answer words are decoded
//! greedily after the question mark until an end token. Evaluation covers
//! exact-set accuracy, WUPS and the consensus metrics.

pub mod dataset;
pub mod error;
pub mod lstm;
pub mod metrics;
pub mod numerics;
pub mod qa_model;
pub mod text;

pub use error::{Error, Result};

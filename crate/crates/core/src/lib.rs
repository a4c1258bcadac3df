//! Abstractive text summarization engine.
//!
//! A self-contained recurrent sequence-to-sequence summarizer: bi-LSTM
//! encoder, attentional LSTM decoder with input feeding, copying via a
//! pointer-generator switch, repetition control (temporal attention,
//! intra-decoder attention, coverage), cross-entropy and reinforcement
//! learning training strategies, beam-family decoding, and ROUGE scoring.
//! All numerics run on a small reverse-mode autodiff tape in `f64`.

pub mod error;
pub mod tensor;
pub mod encdec;
pub mod decoding;
pub mod pointer;
pub mod repetition;
pub mod rouge;
pub mod training;
pub mod textdata;

pub use error::{Error, Result};

//! Retail-domain retraining of a small BERT-style encoder.
//!
//! The pieces: a WordPiece [`tokenizer`], the transformer [`encoder`], the
//! pretraining and downstream heads in [`objectives`], the dependency
//! embedding branch in [`depinject`], corpus handling and the synthetic
//! retail generator in [`datapipe`], training loops and metrics in
//! [`trainkit`], and embedding-drift analysis in [`analyze`].

pub mod analyze;
pub mod checkpoint;
pub mod datapipe;
pub mod depinject;
pub mod encoder;
mod error;
pub mod model;
pub mod objectives;
pub mod tasks;
pub mod tokenizer;
pub mod trainkit;

pub use error::{Error, Result};
pub use redbert_tensor as tensor;

//! Long-document abstractive summarization for Persian text.
//!
//! The pipeline covers corpus cleaning ([`normalize`], [`corpus`]), a BPE
//! tokenizer ([`tokenizer`]), an encoder-decoder transformer whose encoder
//! uses sliding-window plus global attention ([`attention`], [`model`]),
//! Adafactor training with optional activation recomputation
//! ([`optimizer`], [`trainer`]), beam-search generation ([`generate`]) and
//! embedding-matching precision/recall/F1 scoring ([`bertscore`]).

pub mod activations;
pub mod attention;
pub mod bertscore;
pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod generate;
mod layers;
pub mod model;
pub mod normalize;
pub mod optimizer;
pub mod params;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result, Stage};
pub use layers::Dropout;

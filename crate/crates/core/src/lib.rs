//! Retrieval-augmented sequence decoding at desk scale.
//!
//! A small trainable encoder-decoder ([`model::RefModel`]) feeds a kNN
//! datastore of decoder hidden states ([`datastore::Datastore`]). At decode
//! time each step retrieves neighbors, turns them into a token distribution
//! and interpolates it with the model's own ([`decode`]). Around that sit
//! adapters for incremental training, n-gram language models and data
//! selection ([`ngram`]), augmentation stages ([`pipeline`]), metrics
//! ([`eval`]) and seeded synthetic benchmarks ([`synth`]).

// NaN must fail range checks, so `!(x > 0.0)` is intended.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod corpus;
pub mod datastore;
pub mod decode;
pub mod dist;
pub mod error;
pub mod eval;
pub mod model;
pub mod ngram;
pub mod pipeline;
pub mod synth;

pub use corpus::{ParallelCorpus, Sentence, SentencePair, TextPair, Vocab};
pub use dist::Distribution;
pub use error::{Error, Result};
pub use model::{RefModel, StepModel};

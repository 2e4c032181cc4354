//! Learning a tiny autoregressive model that composes in-context
//! demonstration sequences for a frozen predictor.
//!
//! The frozen predictor is a synthetic Bayesian task-mixture classifier
//! ([`world`]) whose predictive probabilities are exact, so every stage of
//! the pipeline can be checked against an independent computation:
//!
//! 1. [`construct`] scores candidate demonstration sequences for anchor
//!    queries with beam search and keeps the best few per anchor.
//! 2. [`model`] is a small causal transformer (or LSTM) over a vocabulary of
//!    supporting-set examples plus `[BOS]`, `[EOS]`, `[QUERY]`.
//! 3. [`train`] fits it with AdamW and a warmup-cosine schedule.
//! 4. [`generate`] decodes demonstration sequences for new queries.
//! 5. [`harness`] compares against retrieval [`baselines`].

pub mod baselines;
pub mod config;
pub mod construct;
pub mod error;
pub mod generate;
pub mod harness;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod scorer;
pub mod train;
pub mod types;
pub mod world;

pub use error::{Error, Result};
pub use types::{ConstructionRecord, Example, IcdSequence, QuerySample};

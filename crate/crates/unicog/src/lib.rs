//! Latent-mind modeling over sentence-level reasoning text.
//!
//! The pipeline: ingest reasoning corpora ([`corpus`]), train a sparse latent
//! variable model with a posterior encoder and a prefix-conditioned
//! autoregressive decoder ([`latent`], [`train`]) on top of a small exact
//! reverse-mode autodiff substrate ([`nn`]), then run latent-space analyses
//! ([`analysis`]) and latent-informed candidate reranking ([`rerank`]).
//! Candidate solutions come from an OpenAI-compatible endpoint or offline
//! files ([`sampler`]); [`synthetic`] provides generators for controlled
//! benchmark experiments.

pub mod analysis;
pub mod config;
pub mod corpus;
pub mod error;
pub mod latent;
pub mod model;
pub mod nn;
pub mod rerank;
pub mod rng;
pub mod sampler;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};

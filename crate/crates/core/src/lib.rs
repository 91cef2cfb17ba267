//! Desk-scale laboratory for measuring cross-domain leakage in small
//! autoregressive language models.
//!
//! The crate covers the full loop: synthetic multi-domain dialog corpora,
//! token-level redaction policies (keyword and classifier based), a tiny
//! from-scratch neural LM with exact per-example gradients, AdamW and
//! DP-AdamW optimizers, a Renyi-DP accountant for the noisy steps, the
//! five fine-tuning recipes plus redaction schedules, and likelihood-ratio
//! attacks that score how often a model leaks one domain's sensitive
//! tokens when prompted from another.
//!
//! Batch-level inner loops (per-example gradients, attack generation)
//! run on rayon when the default `parallel` feature is enabled; every
//! parallel path has a sequential twin with identical output so results
//! are reproducible bit-for-bit either way.

pub mod accountant;
pub mod attack;
pub mod corpus;
pub mod error;
pub mod lm;
pub mod optim;
pub mod par;
pub mod policy;
pub mod seeding;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};

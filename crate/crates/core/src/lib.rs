//! Two-stage retrieval-augmented conversational recommendation.
//!
//! A linear-recurrence retriever proposes candidate sets from a user's item
//! history, a frozen black-box generator ranks them, and an on-policy
//! preference optimizer (DPO, SimPO or GRPO over Plackett-Luce set
//! likelihoods) aligns the retriever with the generator's feedback.

pub mod corpus;
pub mod datasets;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod exec;
pub mod generator;
pub mod jsonl;
pub mod metrics;
pub mod preference;
pub mod retriever;
pub mod sampler;
pub mod seed;
pub mod synthetic;

pub use error::{RarError, Result};
pub use exec::Exec;

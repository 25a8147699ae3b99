//! Deterministic stand-in for the black-box ranker.
//!
//! Candidates are ordered by their inner product with a context vector plus
//! optional seeded Gaussian noise; the output uses the same numbered-list
//! format a chat model is asked for, so it exercises the real parser.

use std::sync::Arc;

use ndarray::{Array1, ArrayView1};
use rand_distr::{Distribution, StandardNormal};

use super::{Generator, PromptSpec};
use crate::embedding::{embed_normalized, EmbeddingProvider, EmbeddingTable, HashEmbedder};
use crate::error::{RarError, Result};
use crate::seed::{fnv1a, SeedStream, MOCK_NOISE};

pub struct MockCandidate<'a> {
    pub id: &'a str,
    pub title: &'a str,
    pub embedding: ArrayView1<'a, f64>,
}

/// Ranks candidates by `context · embedding + noise_scale · N(0, 1)`. Noise
/// is keyed by (seed, id), so candidate order does not affect the result.
pub fn mock_generate(candidates: &[MockCandidate<'_>], context_vector: ArrayView1<'_, f64>, noise_scale: f64, seed: u64) -> String {
    let stream = SeedStream::new(seed).stream(MOCK_NOISE);
    let mut scored: Vec<(f64, &MockCandidate<'_>)> = candidates
        .iter()
        .map(|c| {
            let mut s = context_vector.dot(&c.embedding);
            if noise_scale > 0.0 {
                let z: f64 = StandardNormal.sample(&mut stream.index(fnv1a(c.id.as_bytes())).rng());
                s += noise_scale * z;
            }
            (s, c)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.id.cmp(b.1.id)));
    scored
        .iter()
        .enumerate()
        .map(|(i, (_, c))| format!("{}. {}", i + 1, c.title))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Mock generator reading the conversation context the way a language model
/// would: it embeds the context text with the hash provider and ranks the
/// prompt's candidates against it.
pub struct MockGenerator {
    table: Arc<EmbeddingTable>,
    reader: HashEmbedder,
    noise_scale: f64,
    seed: u64,
}

impl MockGenerator {
    pub fn new(table: Arc<EmbeddingTable>, noise_scale: f64, seed: u64) -> Result<Self> {
        if !(noise_scale >= 0.0) {
            return Err(RarError::invalid("noise_scale must be non-negative"));
        }
        Ok(MockGenerator {
            reader: HashEmbedder::new(table.dim())?,
            table,
            noise_scale,
            seed,
        })
    }

    pub fn context_vector(&self, context: &[String]) -> Result<Array1<f64>> {
        embed_normalized(&self.reader as &dyn EmbeddingProvider, &context.join("\n"))
    }
}

impl Generator for MockGenerator {
    fn generate(&self, prompt: &PromptSpec) -> Result<String> {
        let ctx = self.context_vector(&prompt.context)?;
        let cands = prompt
            .candidates
            .iter()
            .map(|c| {
                Ok(MockCandidate {
                    id: &c.id,
                    title: &c.title,
                    embedding: self.table.vector(&c.id).ok_or_else(|| RarError::UnknownId(c.id.clone()))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let call_seed = self.seed ^ fnv1a(prompt.context.join("\n").as_bytes());
        Ok(mock_generate(&cands, ctx.view(), self.noise_scale, call_seed))
    }
}

/// Returns candidates in prompt (retrieval) order.
pub struct EchoGenerator;

impl Generator for EchoGenerator {
    fn generate(&self, prompt: &PromptSpec) -> Result<String> {
        Ok(prompt
            .candidates
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{}. {}", i + 1, c.title))
            .collect::<Vec<_>>()
            .join("\n"))
    }
}

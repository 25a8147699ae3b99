//! The second-stage ranker: prompt construction, response parsing and the
//! HTTP / mock backends.

pub mod http;
pub mod mock;
pub mod parse;
pub mod prompt;

pub use http::{http_generate, GeneratorEndpoint, HttpGenerator, HttpSettings};
pub use mock::{mock_generate, EchoGenerator, MockCandidate, MockGenerator};
pub use parse::{parse_ranking, RankedOutput, UnmatchedLine};
pub use prompt::{build_prompt, PromptCandidate, PromptSpec};

use crate::error::Result;

/// A frozen black-box ranker.
pub trait Generator: Send + Sync {
    fn generate(&self, prompt: &PromptSpec) -> Result<String>;
}

impl<G: Generator + ?Sized> Generator for Box<G> {
    fn generate(&self, prompt: &PromptSpec) -> Result<String> {
        (**self).generate(prompt)
    }
}

impl<G: Generator + ?Sized> Generator for std::sync::Arc<G> {
    fn generate(&self, prompt: &PromptSpec) -> Result<String> {
        (**self).generate(prompt)
    }
}

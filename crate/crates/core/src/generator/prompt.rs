use serde::{Deserialize, Serialize};

use crate::corpus::MovieEntry;
use crate::error::{RarError, Result};

const INSTRUCTION_HEAD: &str = "You are an expert in movie recommendations. Analyze the provided conversation history to identify the user's preferences, such as genres and actors. Then, rank the";
const INSTRUCTION_TAIL: &str = "candidate movies by how well they match these preferences. Return your answer as a numbered list with each movie on a new line in the format: '<rank>. <movie name>'. Do not include any additional commentary, formatting or chattiness.";

pub const OUTPUT_FORMAT_CLAUSE: &str = "'<rank>. <movie name>'";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptCandidate {
    pub id: String,
    pub title: String,
    pub block: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub instruction: String,
    pub candidates: Vec<PromptCandidate>,
    pub context: Vec<String>,
    pub k: usize,
}

pub fn instruction(k: usize) -> String {
    format!("{INSTRUCTION_HEAD} {k} {INSTRUCTION_TAIL}")
}

/// Assembles the ranking prompt; candidates keep retrieval order.
pub fn build_prompt(context: &[String], candidates: &[&MovieEntry], k: usize) -> Result<PromptSpec> {
    if candidates.is_empty() {
        return Err(RarError::invalid("prompt needs at least one candidate"));
    }
    Ok(PromptSpec {
        instruction: instruction(k),
        candidates: candidates
            .iter()
            .map(|e| PromptCandidate {
                id: e.id.clone(),
                title: e.title.clone(),
                block: e.serialize_kv(),
            })
            .collect(),
        context: context.to_vec(),
        k,
    })
}

impl PromptSpec {
    pub fn render(&self) -> String {
        let mut s = String::with_capacity(256 + self.candidates.len() * 256);
        s.push_str(&self.instruction);
        s.push_str("\n\n");
        for c in &self.candidates {
            s.push_str(&c.block);
            s.push_str("\n\n");
        }
        s.push_str("Conversation history:\n");
        for turn in &self.context {
            s.push_str(turn);
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn movie(id: &str, title: &str) -> MovieEntry {
        MovieEntry {
            id: id.into(),
            title: title.into(),
            year: Some(1995),
            genre: vec!["Crime".into()],
            director: vec!["Michael Mann".into()],
            cast: vec!["Al Pacino".into()],
            plot: "Thieves and cops.".into(),
        }
    }

    #[test]
    fn golden_prompt() {
        let heat = movie("tt1", "Heat");
        let ronin = movie("tt2", "Ronin");
        let p = build_prompt(&["Seeker: I like heist films".into()], &[&heat, &ronin], 25).unwrap();
        let expected = "You are an expert in movie recommendations. Analyze the provided conversation history to identify the user's preferences, such as genres and actors. Then, rank the 25 candidate movies by how well they match these preferences. Return your answer as a numbered list with each movie on a new line in the format: '<rank>. <movie name>'. Do not include any additional commentary, formatting or chattiness.\n\n\
title: Heat\nyear: 1995\ngenre: Crime\ndirector: Michael Mann\ncast: Al Pacino\nplot: Thieves and cops.\n\n\
title: Ronin\nyear: 1995\ngenre: Crime\ndirector: Michael Mann\ncast: Al Pacino\nplot: Thieves and cops.\n\n\
Conversation history:\nSeeker: I like heist films\n";
        assert_eq!(p.render(), expected);
        assert!(p.instruction.contains(OUTPUT_FORMAT_CLAUSE));
        assert!(p.instruction.contains(" 25 "));

        let swapped = build_prompt(&["Seeker: I like heist films".into()], &[&ronin, &heat], 25).unwrap();
        assert_ne!(swapped.render(), p.render());
        assert_eq!(swapped.render().len(), p.render().len());
        assert_eq!(swapped.instruction, p.instruction);
        assert_eq!(swapped.context, p.context);
    }

    #[test]
    fn empty_candidates_rejected() {
        assert!(build_prompt(&[], &[], 5).is_err());
    }
}

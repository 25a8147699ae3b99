use serde::{Deserialize, Serialize};

use super::prompt::PromptCandidate;
use crate::corpus::{fuzzy_similarity, normalize_title, trailing_year, FUZZY_THRESHOLD};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnmatchedLine {
    pub line: String,
    pub best_similarity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedOutput {
    pub items: Vec<String>,
    pub raw_text: String,
    pub unmatched: Vec<UnmatchedLine>,
    /// Lines that had the `<rank>. <title>` shape, matched or not.
    pub emitted_lines: usize,
}

impl RankedOutput {
    /// 1-based rank of the best-placed target, if any target was returned.
    pub fn best_rank(&self, targets: &[String]) -> Option<usize> {
        self.items.iter().position(|id| targets.contains(id)).map(|p| p + 1)
    }
}

/// Splits "<rank>. <title>" (or "<rank>) <title>") after stripping
/// indentation and bullet markers.
fn split_rank_line(line: &str) -> Option<(u64, &str)> {
    let s = line.trim_start().trim_start_matches(['-', '*', '+', '•', ' ', '\t']);
    let digits = s.len() - s.trim_start_matches(|c: char| c.is_ascii_digit()).len();
    if digits == 0 {
        return None;
    }
    let rank: u64 = s[..digits].parse().ok()?;
    let rest = s[digits..].strip_prefix(['.', ')'])?;
    let title = rest.trim().trim_matches('*').trim();
    if title.is_empty() {
        None
    } else {
        Some((rank, title))
    }
}

fn match_title(title: &str, candidates: &[PromptCandidate]) -> (Option<usize>, f64) {
    let norm = normalize_title(title);
    let year = trailing_year(title).map(|y| y.to_string());
    let exact: Vec<usize> = candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| normalize_title(&c.title) == norm)
        .map(|(i, _)| i)
        .collect();
    if !exact.is_empty() {
        let pick = year
            .and_then(|y| {
                exact
                    .iter()
                    .copied()
                    .find(|&i| candidates[i].block.contains(&format!("\nyear: {y}\n")))
            })
            .unwrap_or(exact[0]);
        return (Some(pick), 1.0);
    }
    let mut best = (None, 0.0);
    for (i, c) in candidates.iter().enumerate() {
        let s = fuzzy_similarity(title, &c.title);
        if s > best.1 {
            best = (Some(i), s);
        }
    }
    if best.1 >= FUZZY_THRESHOLD {
        best
    } else {
        (None, best.1)
    }
}

/// Maps a generator response back onto the prompt's candidates. Titles that
/// match no candidate are recorded as unmatched and never admitted.
pub fn parse_ranking(raw_text: &str, candidates: &[PromptCandidate]) -> RankedOutput {
    let mut matched: Vec<(u64, usize, usize)> = Vec::new();
    let mut unmatched = Vec::new();
    let mut emitted = 0;
    for (line_no, line) in raw_text.lines().enumerate() {
        let Some((rank, title)) = split_rank_line(line) else {
            continue;
        };
        emitted += 1;
        match match_title(title, candidates) {
            (Some(c), _) => matched.push((rank, line_no, c)),
            (None, best) => unmatched.push(UnmatchedLine {
                line: line.trim().to_string(),
                best_similarity: best,
            }),
        }
    }
    matched.sort_by_key(|&(rank, line_no, _)| (rank, line_no));
    let mut items: Vec<String> = Vec::with_capacity(matched.len());
    for (_, _, c) in matched {
        let id = &candidates[c].id;
        if !items.contains(id) {
            items.push(id.clone());
        }
    }
    RankedOutput {
        items,
        raw_text: raw_text.to_string(),
        unmatched,
        emitted_lines: emitted,
    }
}

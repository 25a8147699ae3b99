//! Conversation parsing, per-turn example extraction, sessionization and
//! train/val/test splitting.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{RarError, Result};
use crate::jsonl;
use crate::seed::{SeedStream, SPLIT};

pub const DEFAULT_MAX_HISTORY: usize = 64;
pub const DEFAULT_SESSION_GAP_SECS: i64 = 30 * 60;
pub const DEFAULT_SUBSAMPLE_CAP: usize = 2500;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Seeker,
    Recommender,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
    #[serde(default)]
    pub items: Vec<String>,
    /// Raw mention strings awaiting linking.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub mentions: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub turns: Vec<Turn>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unresolved: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub id: String,
    pub context: Vec<String>,
    pub history_items: Vec<String>,
    pub targets: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitStats {
    pub examples: usize,
    /// Recommender turns whose items all appeared earlier.
    pub skipped_repeats: usize,
}

/// Cuts a linked conversation at each recommender turn.
pub fn split_conversation(conv: &Conversation, max_history: usize) -> (Vec<TrainingExample>, SplitStats) {
    let mut stats = SplitStats::default();
    let mut out = Vec::new();
    let mut seen: HashSet<&str> = HashSet::new();
    let mut history: Vec<String> = Vec::new();
    let mut context: Vec<String> = Vec::new();
    for (t, turn) in conv.turns.iter().enumerate() {
        if turn.role == Role::Recommender && !turn.items.is_empty() {
            let mut targets: Vec<String> = Vec::new();
            for id in &turn.items {
                if !seen.contains(id.as_str()) && !targets.contains(id) {
                    targets.push(id.clone());
                }
            }
            if targets.is_empty() {
                stats.skipped_repeats += 1;
            } else {
                let start = history.len().saturating_sub(max_history);
                out.push(TrainingExample {
                    id: format!("{}#{}", conv.id, t),
                    context: context.clone(),
                    history_items: history[start..].to_vec(),
                    targets,
                });
            }
        }
        for id in &turn.items {
            seen.insert(id.as_str());
            history.push(id.clone());
        }
        context.push(turn.text.clone());
    }
    stats.examples = out.len();
    (out, stats)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub user: String,
    pub item_ids: Vec<String>,
    pub timestamps: Vec<i64>,
}

/// Splits each user's interaction stream wherever the gap exceeds
/// `gap_seconds`; sessions shorter than two items are discarded.
pub fn sessionize(interactions: &[Interaction], gap_seconds: i64) -> Vec<Session> {
    let mut sorted: Vec<&Interaction> = interactions.iter().collect();
    sorted.sort_by(|a, b| a.user.cmp(&b.user).then(a.timestamp.cmp(&b.timestamp)));
    let mut out = Vec::new();
    let mut cur: Option<Session> = None;
    for it in sorted {
        let continues = cur.as_ref().is_some_and(|s| {
            s.user == it.user && it.timestamp - s.timestamps.last().copied().unwrap_or(i64::MIN) <= gap_seconds
        });
        if !continues {
            if let Some(s) = cur.take().filter(|s| s.item_ids.len() >= 2) {
                out.push(s);
            }
            cur = Some(Session {
                user: it.user.clone(),
                item_ids: Vec::new(),
                timestamps: Vec::new(),
            });
        }
        let s = cur.as_mut().expect("session open");
        s.item_ids.push(it.item.clone());
        s.timestamps.push(it.timestamp);
    }
    if let Some(s) = cur.filter(|s| s.item_ids.len() >= 2) {
        out.push(s);
    }
    out
}

/// Reads interactions from CSV (header `user,item,timestamp`) or JSONL,
/// chosen by file extension.
pub fn read_interactions(path: &Path) -> Result<Vec<Interaction>> {
    if path.extension().is_some_and(|e| e == "csv") {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| RarError::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })?;
        rdr.deserialize()
            .enumerate()
            .map(|(i, r)| {
                r.map_err(|e| RarError::Parse {
                    path: path.to_path_buf(),
                    line: i + 2,
                    message: e.to_string(),
                })
            })
            .collect()
    } else {
        jsonl::read(path)
    }
}

/// Deterministic shuffled partition into train / validation / test.
pub fn split_dataset<T: Clone>(items: &[T], ratios: (f64, f64, f64), seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let (a, b, c) = ratios;
    if !(a > 0.0 && b > 0.0 && c > 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(RarError::invalid(format!(
            "split ratios must be positive and sum to 1, got ({a}, {b}, {c})"
        )));
    }
    let n = items.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut SeedStream::new(seed).stream(SPLIT).rng());
    let n_train = ((n as f64) * a).round() as usize;
    let n_val = (((n as f64) * b).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let pick = |idx: &[usize]| idx.iter().map(|&i| items[i].clone()).collect::<Vec<_>>();
    Ok((
        pick(&order[..n_train]),
        pick(&order[n_train..n_train + n_val]),
        pick(&order[n_train + n_val..]),
    ))
}

/// Uniform subsample without replacement, preserving input order.
pub fn subsample<T: Clone>(items: &[T], cap: usize, seed: u64) -> Vec<T> {
    if items.len() <= cap {
        return items.to_vec();
    }
    let mut rng = SeedStream::new(seed).stream("subsample").rng();
    let mut idx = rand::seq::index::sample(&mut rng, items.len(), cap).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| items[i].clone()).collect()
}

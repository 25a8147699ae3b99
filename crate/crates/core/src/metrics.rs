//! Ranking metrics under the highest-ranked-label convention.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{RarError, Result};
use crate::generator::RankedOutput;

fn best_rank_within(ranked: &[String], targets: &[String], k: usize) -> Result<Option<usize>> {
    if targets.is_empty() {
        return Err(RarError::invalid("metric needs at least one target"));
    }
    Ok(ranked.iter().take(k).position(|id| targets.contains(id)).map(|p| p + 1))
}

/// `1 / log2(1 + rank)` of the best-placed target within the top k, else 0.
pub fn ndcg_at_k(ranked: &[String], targets: &[String], k: usize) -> Result<f64> {
    Ok(best_rank_within(ranked, targets, k)?.map_or(0.0, |r| 1.0 / ((1 + r) as f64).log2()))
}

/// 1 if any target appears in the top k, else 0.
pub fn recall_at_k(ranked: &[String], targets: &[String], k: usize) -> Result<f64> {
    Ok(if best_rank_within(ranked, targets, k)?.is_some() { 1.0 } else { 0.0 })
}

/// Unmatched ranking lines over all emitted ranking lines.
pub fn hallucination_rate(outputs: &[RankedOutput]) -> Result<f64> {
    let emitted: usize = outputs.iter().map(|o| o.emitted_lines).sum();
    if emitted == 0 {
        return Err(RarError::invalid("no ranking lines were emitted"));
    }
    let unmatched: usize = outputs.iter().map(|o| o.unmatched.len()).sum();
    Ok(unmatched as f64 / emitted as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketStat {
    pub size: usize,
    pub ndcg10: f64,
}

/// Per-example input to [`popularity_buckets`].
#[derive(Clone, Debug, PartialEq)]
pub struct ExampleScore {
    pub targets: Vec<String>,
    pub ndcg10: f64,
}

/// Item occurrence counts over the training split (targets and history).
pub fn item_counts<'a>(examples: impl IntoIterator<Item = &'a crate::datasets::TrainingExample>) -> HashMap<String, usize> {
    let mut counts = HashMap::new();
    for ex in examples {
        for id in ex.targets.iter().chain(&ex.history_items) {
            *counts.entry(id.clone()).or_insert(0) += 1;
        }
    }
    counts
}

fn bucket_label(count: usize, thresholds: &[usize]) -> String {
    if thresholds == [1] {
        return if count == 0 { "unseen".into() } else { "seen".into() };
    }
    match thresholds.iter().rposition(|&t| count >= t) {
        None if count == 0 => "unseen".into(),
        None => format!("<{}", thresholds[0]),
        Some(i) if i + 1 == thresholds.len() => format!("{}+", thresholds[i]),
        Some(i) => format!("{}-{}", thresholds[i], thresholds[i + 1] - 1),
    }
}

/// Groups examples by the training frequency of their most frequent target
/// and averages NDCG@10 per group. `thresholds` are ascending lower bounds;
/// `[1]` gives the unseen / seen split.
pub fn popularity_buckets(
    results: &[ExampleScore],
    train_counts: &HashMap<String, usize>,
    thresholds: &[usize],
) -> BTreeMap<String, BucketStat> {
    let mut acc: BTreeMap<String, (usize, f64)> = BTreeMap::new();
    for r in results {
        let count = r.targets.iter().map(|t| train_counts.get(t).copied().unwrap_or(0)).max().unwrap_or(0);
        let e = acc.entry(bucket_label(count, thresholds)).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += r.ndcg10;
    }
    acc.into_iter()
        .map(|(k, (n, sum))| (k, BucketStat { size: n, ndcg10: sum / n as f64 }))
        .collect()
}

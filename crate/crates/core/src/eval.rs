//! Retrieve → generate → parse → score over a split of examples.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusIndex, MovieEntry};
use crate::datasets::TrainingExample;
use crate::embedding::EmbeddingTable;
use crate::error::{RarError, Result};
use crate::exec::Exec;
use crate::generator::{build_prompt, parse_ranking, Generator, RankedOutput};
use crate::metrics::{hallucination_rate, ndcg_at_k, popularity_buckets, recall_at_k, BucketStat, ExampleScore};
use crate::retriever::{score_history, RetrieverParams};
use crate::sampler::retrieve_topk;

/// Everything downstream of the retriever that a step or an evaluation needs.
#[derive(Clone, Copy)]
pub struct RecEnv<'a> {
    pub table: &'a EmbeddingTable,
    pub corpus: &'a CorpusIndex,
    pub generator: &'a dyn Generator,
    pub exec: Exec,
}

impl RecEnv<'_> {
    pub fn entries(&self, ids: &[String]) -> Result<Vec<&MovieEntry>> {
        ids.iter()
            .map(|id| self.corpus.get(id).ok_or_else(|| RarError::UnknownId(id.clone())))
            .collect()
    }

    /// Prompts the generator with `items` and parses its answer.
    pub fn rank(&self, context: &[String], items: &[String], k: usize) -> Result<RankedOutput> {
        let prompt = build_prompt(context, &self.entries(items)?, k)?;
        let raw = self.generator.generate(&prompt)?;
        Ok(parse_ranking(&raw, &prompt.candidates))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub k: usize,
    pub ks: Vec<usize>,
    pub popularity_thresholds: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k: 25,
            ks: vec![5, 10],
            popularity_thresholds: vec![1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: BTreeMap<String, f64>,
    pub n_examples: usize,
    pub n_failed: usize,
    /// Examples without any history item to condition on.
    pub n_skipped: usize,
    pub hallucination_rate: f64,
    pub popularity_buckets: BTreeMap<String, BucketStat>,
    pub config_hash: String,
    pub seed: u64,
}

impl EvalReport {
    pub fn ndcg10(&self) -> f64 {
        self.metrics.get("N@10").copied().unwrap_or(0.0)
    }

    /// Plain-text table: one header row, one value row.
    pub fn table(&self, ks: &[usize]) -> String {
        let cols: Vec<String> = ks.iter().flat_map(|k| [format!("N@{k}"), format!("R@{k}")]).collect();
        let mut s = String::new();
        for c in &cols {
            let _ = write!(s, "{c:<8}");
        }
        s = s.trim_end().to_string();
        s.push('\n');
        let vals: Vec<String> = cols
            .iter()
            .map(|c| format!("{:<8.4}", self.metrics.get(c).copied().unwrap_or(f64::NAN)))
            .collect();
        s.push_str(vals.concat().trim_end());
        s.push('\n');
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, body + "\n").map_err(|e| RarError::io(path, e))
    }
}

enum Outcome {
    Scored { ranked: RankedOutput, targets: Vec<String> },
    Skipped,
    Failed(RarError),
}

fn evaluate_one(params: &RetrieverParams, env: &RecEnv<'_>, ex: &TrainingExample, k: usize) -> Outcome {
    if ex.history_items.is_empty() || ex.targets.is_empty() {
        return Outcome::Skipped;
    }
    let run = || -> Result<RankedOutput> {
        let pool = score_history(params, env.table, &ex.history_items, Exec::Sequential)?;
        let set = retrieve_topk(&pool, k, &HashSet::new())?;
        env.rank(&ex.context, &set.items, k)
    };
    match run() {
        Ok(ranked) => Outcome::Scored {
            ranked,
            targets: ex.targets.clone(),
        },
        Err(e) => Outcome::Failed(e),
    }
}

/// Greedy top-k retrieval for every example, then generator ranking and
/// metric aggregation in example order. Failed generations are excluded and
/// counted.
pub fn evaluate(
    params: &RetrieverParams,
    env: &RecEnv<'_>,
    examples: &[TrainingExample],
    train_counts: &HashMap<String, usize>,
    cfg: &EvalConfig,
    config_hash: &str,
    seed: u64,
) -> Result<EvalReport> {
    if cfg.ks.iter().any(|&k| k == 0 || k > cfg.k) {
        return Err(RarError::invalid(format!("metric cut-offs {:?} must lie in 1..={}", cfg.ks, cfg.k)));
    }
    let outcomes = env.exec.map(examples, |ex| evaluate_one(params, env, ex, cfg.k));

    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    let mut scored = Vec::new();
    let mut outputs = Vec::new();
    let (mut failed, mut skipped) = (0, 0);
    for (ex, o) in examples.iter().zip(outcomes) {
        match o {
            Outcome::Scored { ranked, targets } => {
                for &k in &cfg.ks {
                    *sums.entry(format!("N@{k}")).or_insert(0.0) += ndcg_at_k(&ranked.items, &targets, k)?;
                    *sums.entry(format!("R@{k}")).or_insert(0.0) += recall_at_k(&ranked.items, &targets, k)?;
                }
                scored.push(ExampleScore {
                    ndcg10: ndcg_at_k(&ranked.items, &targets, 10)?,
                    targets,
                });
                outputs.push(ranked);
            }
            Outcome::Skipped => skipped += 1,
            Outcome::Failed(e) => {
                log::warn!("evaluation of {} failed: {e}", ex.id);
                failed += 1;
            }
        }
    }
    let n = scored.len();
    if n == 0 {
        return Err(RarError::invalid(format!(
            "no example could be evaluated ({failed} failed, {skipped} without history)"
        )));
    }
    Ok(EvalReport {
        metrics: sums.into_iter().map(|(k, v)| (k, v / n as f64)).collect(),
        n_examples: n,
        n_failed: failed,
        n_skipped: skipped,
        hallucination_rate: hallucination_rate(&outputs)?,
        popularity_buckets: popularity_buckets(&scored, train_counts, &cfg.popularity_thresholds),
        config_hash: config_hash.to_string(),
        seed,
    })
}

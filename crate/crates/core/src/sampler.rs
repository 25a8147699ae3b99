//! Plackett-Luce policy over ordered candidate sets.
//!
//! A candidate set of size k is an ordered draw without replacement where
//! each step picks item j from the remaining pool with probability
//! `exp(s_j) / sum_{remaining} exp(s)`. Sampling uses the Gumbel-top-k
//! construction, which induces exactly that distribution.

use std::collections::HashSet;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{RarError, Result};
use crate::seed::Rng;

/// Scores over a denominator pool. `rows` are embedding-table rows, kept so
/// score gradients can be chained back onto the query vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Pool {
    pub ids: Vec<String>,
    pub rows: Vec<usize>,
    pub scores: Vec<f64>,
    pub tag: String,
}

impl Pool {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// Positions of `ids` within the pool; fails on the first id not present.
    pub fn positions(&self, ids: &[String]) -> Result<Vec<usize>> {
        ids.iter()
            .map(|id| self.position(id).ok_or_else(|| RarError::UnknownId(id.clone())))
            .collect()
    }

    /// Indices sorted by descending score, ties by ascending id.
    pub fn ranked(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]).then_with(|| self.ids[a].cmp(&self.ids[b])));
        order
    }

    /// The `m` best-scoring entries not in `exclusions`.
    pub fn shortlist(&self, m: usize, exclusions: &HashSet<String>, tag: impl Into<String>) -> Pool {
        let keep: Vec<usize> = self
            .ranked()
            .into_iter()
            .filter(|&i| !exclusions.contains(&self.ids[i]))
            .take(m)
            .collect();
        self.subset(&keep, tag)
    }

    pub fn without(&self, exclusions: &HashSet<String>, tag: impl Into<String>) -> Pool {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| !exclusions.contains(&self.ids[i])).collect();
        self.subset(&keep, tag)
    }

    pub fn subset(&self, keep: &[usize], tag: impl Into<String>) -> Pool {
        Pool {
            ids: keep.iter().map(|&i| self.ids[i].clone()).collect(),
            rows: keep.iter().map(|&i| self.rows[i]).collect(),
            scores: keep.iter().map(|&i| self.scores[i]).collect(),
            tag: tag.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    /// Item ids in selection order.
    pub items: Vec<String>,
    /// Retriever scores of `items` at sampling time.
    pub scores: Vec<f64>,
    #[serde(rename = "pool")]
    pub pool_tag: String,
    #[serde(rename = "logp")]
    pub log_prob: f64,
    /// Parameter version that produced the scores.
    #[serde(default)]
    pub policy_version: u64,
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if k == 0 {
        return Err(RarError::invalid("k must be positive"));
    }
    if k > n {
        return Err(RarError::InsufficientPool { required: k, available: n });
    }
    Ok(())
}

fn gumbel(rng: &mut Rng) -> f64 {
    // open interval keeps both logs finite
    let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

/// Draws k distinct positions by perturbing `scores / temperature` with
/// independent Gumbel noise and keeping the k largest, in order.
pub fn sample_positions(scores: &[f64], k: usize, temperature: f64, rng: &mut Rng) -> Result<Vec<usize>> {
    check_k(scores.len(), k)?;
    if !(temperature > 0.0) {
        return Err(RarError::invalid("temperature must be positive"));
    }
    let mut keyed: Vec<(f64, usize)> = scores
        .iter()
        .enumerate()
        .map(|(i, s)| (s / temperature + gumbel(rng), i))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if k < keyed.len() {
        keyed.select_nth_unstable_by(k - 1, cmp);
        keyed.truncate(k);
    }
    keyed.sort_by(cmp);
    Ok(keyed.into_iter().map(|(_, i)| i).collect())
}

fn logsumexp_masked(scores: &[f64], removed: &[bool]) -> f64 {
    let max = scores
        .iter()
        .zip(removed)
        .filter(|(_, r)| !**r)
        .map(|(s, _)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = scores
        .iter()
        .zip(removed)
        .filter(|(_, r)| !**r)
        .map(|(s, _)| (s - max).exp())
        .sum();
    max + sum.ln()
}

fn check_chosen(n: usize, chosen: &[usize]) -> Result<()> {
    check_k(n, chosen.len())?;
    let mut seen = vec![false; n];
    for &c in chosen {
        if c >= n {
            return Err(RarError::invalid(format!("position {c} outside pool of {n}")));
        }
        if std::mem::replace(&mut seen[c], true) {
            return Err(RarError::invalid(format!("position {c} selected twice")));
        }
    }
    Ok(())
}

/// Log-likelihood of the ordered selection `chosen` under Plackett-Luce.
pub fn set_log_prob(scores: &[f64], chosen: &[usize]) -> Result<f64> {
    check_chosen(scores.len(), chosen)?;
    let mut removed = vec![false; scores.len()];
    let mut total = 0.0;
    for &c in chosen {
        total += scores[c] - logsumexp_masked(scores, &removed);
        removed[c] = true;
    }
    Ok(total)
}

/// Gradient of [`set_log_prob`] with respect to every pool score.
pub fn set_log_prob_grad(scores: &[f64], chosen: &[usize]) -> Result<Vec<f64>> {
    check_chosen(scores.len(), chosen)?;
    let mut removed = vec![false; scores.len()];
    let mut grad = vec![0.0; scores.len()];
    for &c in chosen {
        let lse = logsumexp_masked(scores, &removed);
        for (j, g) in grad.iter_mut().enumerate() {
            if !removed[j] {
                *g -= (scores[j] - lse).exp();
            }
        }
        grad[c] += 1.0;
        removed[c] = true;
    }
    Ok(grad)
}

/// Samples a candidate set from the pool's Plackett-Luce policy.
pub fn sample_set(pool: &Pool, k: usize, temperature: f64, rng: &mut Rng) -> Result<CandidateSet> {
    let pos = sample_positions(&pool.scores, k, temperature, rng)?;
    let scaled: Vec<f64> = pool.scores.iter().map(|s| s / temperature).collect();
    Ok(CandidateSet {
        items: pos.iter().map(|&i| pool.ids[i].clone()).collect(),
        scores: pos.iter().map(|&i| pool.scores[i]).collect(),
        pool_tag: pool.tag.clone(),
        log_prob: set_log_prob(&scaled, &pos)?,
        policy_version: 0,
    })
}

/// Deterministic top-k by score (ties by ascending id), skipping exclusions.
pub fn retrieve_topk(pool: &Pool, k: usize, exclusions: &HashSet<String>) -> Result<CandidateSet> {
    let available = pool.ids.iter().filter(|id| !exclusions.contains(*id)).count();
    if k == 0 {
        return Err(RarError::invalid("k must be positive"));
    }
    if available < k {
        return Err(RarError::InsufficientPool { required: k, available });
    }
    let pos: Vec<usize> = pool
        .ranked()
        .into_iter()
        .filter(|&i| !exclusions.contains(&pool.ids[i]))
        .take(k)
        .collect();
    Ok(CandidateSet {
        items: pos.iter().map(|&i| pool.ids[i].clone()).collect(),
        scores: pos.iter().map(|&i| pool.scores[i]).collect(),
        pool_tag: pool.tag.clone(),
        log_prob: set_log_prob(&pool.scores, &pos)?,
        policy_version: 0,
    })
}

//! Supervised next-item pretraining on interaction sequences.
//!
//! Every position of every sequence predicts the following item with a
//! softmax over {target} ∪ sampled negatives ∪ the batch's other targets.

use std::collections::BTreeSet;

use ndarray::Array1;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::optim::{LrSchedule, Optimizer, DEFAULT_WARMUP};
use super::{backward, forward_all, Grads, Recurrence, RetrieverParams};
use crate::embedding::EmbeddingTable;
use crate::error::{RarError, Result};
use crate::exec::Exec;
use crate::seed::{SeedStream, DROPOUT, NEGATIVES};

pub const DEFAULT_NEGATIVES: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub batch_size: usize,
    pub negatives_per_step: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub max_history: usize,
    /// Set from the run's root seed, not from configuration files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            batch_size: 16,
            negatives_per_step: DEFAULT_NEGATIVES,
            lr: 1e-3,
            warmup_steps: DEFAULT_WARMUP,
            total_steps: 600,
            max_history: crate::datasets::DEFAULT_MAX_HISTORY,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn optimizer(&self) -> Result<Optimizer> {
        Optimizer::new(LrSchedule {
            base_lr: self.lr,
            warmup_steps: self.warmup_steps,
            total_steps: self.total_steps,
        })
    }
}

fn log_softmax_grad(scores: &[f64], target: usize) -> (f64, Vec<f64>) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
    let lse = max + z.ln();
    let mut g: Vec<f64> = scores.iter().map(|s| (s - lse).exp()).collect();
    g[target] -= 1.0;
    (lse - scores[target], g)
}

/// Mean next-item cross-entropy over all positions in the batch and its
/// gradient. Deterministic in (`params`, `batch`, `step_seed`).
pub fn pretrain_loss_grad(
    params: &RetrieverParams,
    batch: &[Vec<String>],
    table: &EmbeddingTable,
    negatives: usize,
    step_seed: SeedStream,
    train_mode: bool,
    exec: Exec,
) -> Result<(f64, Grads)> {
    let rows: Vec<Vec<usize>> = batch
        .iter()
        .map(|seq| {
            if seq.len() < 2 {
                return Err(RarError::invalid("pretraining sequences need a history item and a target"));
            }
            seq.iter()
                .map(|id| table.row_of(id).ok_or_else(|| RarError::UnknownId(id.clone())))
                .collect()
        })
        .collect::<Result<_>>()?;
    let in_batch: BTreeSet<usize> = rows.iter().flat_map(|r| r[1..].iter().copied()).collect();
    let n_items = table.len();

    let per_seq = exec.map_range(rows.len(), |s| -> Result<(f64, usize, Grads)> {
        let seq = &rows[s];
        let inputs: Vec<Array1<f64>> = seq[..seq.len() - 1].iter().map(|&r| table.row(r).to_owned()).collect();
        let dropout_seed = step_seed.stream(DROPOUT).index(s as u64).value();
        let (queries, trace) = forward_all(params, &inputs, train_mode, dropout_seed, Recurrence::Sequential)?;
        let mut rng = step_seed.stream(NEGATIVES).index(s as u64).rng();
        let mut loss = 0.0;
        let mut qgrads = Vec::with_capacity(inputs.len());
        for pos in 0..inputs.len() {
            let target = seq[pos + 1];
            let mut cands: Vec<usize> = (0..negatives).map(|_| rng.random_range(0..n_items)).collect();
            cands.extend(in_batch.iter().copied());
            cands.retain(|&r| r != target);
            cands.sort_unstable();
            cands.dedup();
            cands.insert(0, target);
            let q = queries.row(pos);
            let scores: Vec<f64> = cands.iter().map(|&r| table.row(r).dot(&q)).collect();
            let (l, g) = log_softmax_grad(&scores, 0);
            loss += l;
            let mut dq = Array1::zeros(table.dim());
            for (&r, &w) in cands.iter().zip(&g) {
                dq.scaled_add(w, &table.row(r));
            }
            qgrads.push((pos, dq));
        }
        Ok((loss, inputs.len(), backward::backward(params, &trace, &qgrads)))
    });

    let mut total = 0.0;
    let mut count = 0usize;
    let mut grads = Grads::zeros_like(params);
    for r in per_seq {
        let (l, c, g) = r?;
        total += l;
        count += c;
        grads.add_assign(&g);
    }
    grads.scale(1.0 / count as f64);
    Ok((total / count as f64, grads))
}

/// One optimizer step on `batch`. The random streams are keyed by the
/// optimizer's step counter, so a resumed run continues bit-identically.
pub fn pretrain_step(
    params: &mut RetrieverParams,
    opt: &mut Optimizer,
    batch: &[Vec<String>],
    table: &EmbeddingTable,
    cfg: &PretrainConfig,
    exec: Exec,
) -> Result<f64> {
    let step_seed = SeedStream::new(cfg.seed).stream("pretrain").index(opt.step);
    let (loss, grads) = pretrain_loss_grad(params, batch, table, cfg.negatives_per_step, step_seed, true, exec)?;
    if !loss.is_finite() {
        return Err(RarError::NonFinite(format!("pretraining loss {loss} at step {}", opt.step)));
    }
    opt.apply(params, &grads)?;
    Ok(loss)
}

/// Keeps the most recent `max_history + 1` items of each sequence.
pub fn prepare_sequences(sequences: &[Vec<String>], max_history: usize) -> Vec<Vec<String>> {
    sequences
        .iter()
        .filter(|s| s.len() >= 2)
        .map(|s| s[s.len().saturating_sub(max_history + 1)..].to_vec())
        .collect()
}

/// Runs steps until the optimizer reaches `cfg.total_steps`; batches are drawn
/// by step index. Returns the per-step losses of this call.
pub fn pretrain(
    params: &mut RetrieverParams,
    opt: &mut Optimizer,
    sequences: &[Vec<String>],
    table: &EmbeddingTable,
    cfg: &PretrainConfig,
    exec: Exec,
) -> Result<Vec<f64>> {
    let seqs = prepare_sequences(sequences, cfg.max_history);
    if seqs.is_empty() {
        return Err(RarError::invalid("no pretraining sequence has two or more items"));
    }
    let mut losses = Vec::new();
    while opt.step < cfg.total_steps {
        let mut rng = SeedStream::new(cfg.seed).stream("batches").index(opt.step).rng();
        let batch: Vec<Vec<String>> = (0..cfg.batch_size.max(1))
            .map(|_| seqs[rng.random_range(0..seqs.len())].clone())
            .collect();
        losses.push(pretrain_step(params, opt, &batch, table, cfg, exec)?);
    }
    Ok(losses)
}

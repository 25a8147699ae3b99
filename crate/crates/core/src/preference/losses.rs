//! Preference losses over set log-probabilities. Each returns the loss and its
//! derivatives with respect to the log-probability inputs.

use crate::error::{RarError, Result};
use crate::generator::RankedOutput;
use crate::metrics::ndcg_at_k;

pub const DEFAULT_ADV_EPS: f64 = 1e-8;

/// NDCG of the best-ranked target in the generator's top k.
pub fn ndcg_reward(ranked: &RankedOutput, targets: &[String], k: usize) -> Result<f64> {
    ndcg_at_k(&ranked.items, targets, k)
}

fn finite(xs: &[f64], what: &str) -> Result<()> {
    match xs.iter().find(|x| !x.is_finite()) {
        Some(x) => Err(RarError::NonFinite(format!("{what} input {x}"))),
        None => Ok(()),
    }
}

/// `-log σ(m)` computed without overflow.
pub fn neg_log_sigmoid(m: f64) -> f64 {
    if m >= 0.0 {
        (-m).exp().ln_1p()
    } else {
        -m + m.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairLoss {
    pub loss: f64,
    pub d_winner: f64,
    pub d_loser: f64,
}

/// DPO on a (winner, loser) pair. Reference log-probs shift the margin when
/// given; without them the policy is compared against a uniform reference.
pub fn dpo_loss(logp_w: f64, logp_l: f64, reference: Option<(f64, f64)>, beta: f64) -> Result<PairLoss> {
    let (ref_w, ref_l) = reference.unwrap_or((0.0, 0.0));
    finite(&[logp_w, logp_l, ref_w, ref_l, beta], "dpo")?;
    let m = beta * ((logp_w - ref_w) - (logp_l - ref_l));
    let s = sigmoid(-m);
    Ok(PairLoss {
        loss: neg_log_sigmoid(m),
        d_winner: -beta * s,
        d_loser: beta * s,
    })
}

/// SimPO with margin `gamma`. Both sets have the same size, so the length
/// normalization is absorbed into `beta`.
pub fn simpo_loss(logp_w: f64, logp_l: f64, beta: f64, gamma: f64) -> Result<PairLoss> {
    finite(&[logp_w, logp_l, beta, gamma], "simpo")?;
    let m = beta * logp_w - beta * logp_l - gamma;
    let s = sigmoid(-m);
    Ok(PairLoss {
        loss: neg_log_sigmoid(m),
        d_winner: -beta * s,
        d_loser: beta * s,
    })
}

/// Group-standardized advantages using the population standard deviation.
/// The denominator is floored at `eps` rather than offset by it, so a
/// well-spread group standardizes exactly and a flat group yields zeros.
pub fn grpo_advantages(rewards: &[f64], eps: f64) -> Vec<f64> {
    let n = rewards.len() as f64;
    if rewards.is_empty() {
        return Vec::new();
    }
    // the mean of equal values can miss them by an ulp
    if rewards.iter().all(|&r| r == rewards[0]) {
        return vec![0.0; rewards.len()];
    }
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt().max(eps);
    rewards.iter().map(|r| (r - mean) / denom).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupLoss {
    pub loss: f64,
    pub grads: Vec<f64>,
}

/// Policy-gradient surrogate `-(1/g) Σ logp_i Â_i`, plus
/// `kl_coeff · (1/g) Σ (logp_i - ref_i)` when references are supplied.
pub fn grpo_loss(logps: &[f64], advantages: &[f64], kl_coeff: f64, ref_logps: Option<&[f64]>) -> Result<GroupLoss> {
    if logps.len() != advantages.len() || ref_logps.is_some_and(|r| r.len() != logps.len()) {
        return Err(RarError::invalid("grpo inputs differ in length"));
    }
    if logps.is_empty() {
        return Err(RarError::invalid("grpo needs a non-empty group"));
    }
    finite(logps, "grpo")?;
    finite(advantages, "grpo")?;
    let g = logps.len() as f64;
    let mut loss = -logps.iter().zip(advantages).map(|(l, a)| l * a).sum::<f64>() / g;
    let mut grads: Vec<f64> = advantages.iter().map(|a| -a / g).collect();
    if let (true, Some(refs)) = (kl_coeff > 0.0, ref_logps) {
        finite(refs, "grpo reference")?;
        loss += kl_coeff * logps.iter().zip(refs).map(|(l, r)| l - r).sum::<f64>() / g;
        grads.iter_mut().for_each(|d| *d += kl_coeff / g);
    }
    Ok(GroupLoss { loss, grads })
}

/// Mean negative log-softmax of the target positions over `scores`.
pub fn nll_loss(scores: &[f64], targets: &[usize]) -> Result<(f64, Vec<f64>)> {
    if targets.is_empty() {
        return Err(RarError::invalid("nll needs at least one target"));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= scores.len()) {
        return Err(RarError::invalid(format!("target position {t} outside pool of {}", scores.len())));
    }
    finite(scores, "nll")?;
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    let n = targets.len() as f64;
    let mut grad: Vec<f64> = scores.iter().map(|s| (s - lse).exp()).collect();
    let mut loss = 0.0;
    for &t in targets {
        loss += lse - scores[t];
        grad[t] -= 1.0 / n;
    }
    Ok((loss / n, grad))
}

//! Online on-policy post-training of the retriever from generator feedback.
//!
//! Per example: forward the history, sample candidate sets from the current
//! policy, have the generator rank each set, turn the rewards into a pair or
//! a group, and take one optimizer step on `nll + rl`.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array1;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::annotate::{annotate_pair, Annotation, ScoredSet, DEFAULT_MAX_RESAMPLES};
use super::losses::{dpo_loss, grpo_advantages, grpo_loss, ndcg_reward, nll_loss, simpo_loss, DEFAULT_ADV_EPS};
use crate::datasets::TrainingExample;
use crate::eval::{evaluate, EvalConfig, RecEnv};
use crate::error::{RarError, Result};
use crate::retriever::optim::{LrSchedule, Optimizer, UpdateRule, DEFAULT_WARMUP};
use crate::retriever::{backward, forward_all, query_gradient, score_corpus, Recurrence, RetrieverParams};
use crate::sampler::{sample_set, set_log_prob, set_log_prob_grad, CandidateSet, Pool};
use crate::seed::{Rng, SeedStream, DROPOUT, SAMPLER};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Dpo,
    Simpo,
    Grpo,
    /// Likelihood anchor only; the supervised baseline.
    Sft,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Dpo => "dpo",
            Algorithm::Simpo => "simpo",
            Algorithm::Grpo => "grpo",
            Algorithm::Sft => "sft",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = RarError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dpo" => Ok(Algorithm::Dpo),
            "simpo" => Ok(Algorithm::Simpo),
            "grpo" => Ok(Algorithm::Grpo),
            "sft" => Ok(Algorithm::Sft),
            other => Err(RarError::invalid(format!("unknown algorithm {other:?} (dpo, simpo, grpo, sft)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub beta: f64,
    pub gamma: f64,
    /// Group size for GRPO; pairwise algorithms always draw two sets.
    pub group_size: usize,
    pub k: usize,
    /// Sampler pool size M; 0 samples from the whole corpus.
    pub pool_size: usize,
    pub temperature: f64,
    pub lr: f64,
    pub warmup_steps: u64,
    pub steps: usize,
    pub max_resamples: usize,
    pub use_reference: bool,
    pub kl_coeff: f64,
    pub nll_weight: f64,
    /// Validate every this many steps; 0 validates only at the end.
    pub eval_every: usize,
    pub update_rule: UpdateRule,
    /// Set from the run's root seed, not from configuration files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            algorithm: Algorithm::Dpo,
            beta: 0.05,
            gamma: 0.0,
            group_size: 8,
            k: 25,
            pool_size: 200,
            temperature: 1.0,
            lr: 1e-3,
            warmup_steps: DEFAULT_WARMUP,
            steps: 500,
            max_resamples: DEFAULT_MAX_RESAMPLES,
            use_reference: false,
            kl_coeff: 0.0,
            nll_weight: 1.0,
            eval_every: 200,
            update_rule: UpdateRule::Adam,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(RarError::invalid(m));
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be positive, got {}", self.beta));
        }
        if !(self.gamma >= 0.0) {
            return bad(format!("gamma must be non-negative, got {}", self.gamma));
        }
        if self.group_size < 2 {
            return bad(format!("group size must be at least 2, got {}", self.group_size));
        }
        if self.k == 0 || (self.pool_size != 0 && self.k > self.pool_size) {
            return bad(format!("k = {} must be positive and at most the pool size {}", self.k, self.pool_size));
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.kl_coeff >= 0.0) || !(self.nll_weight >= 0.0) {
            return bad("kl_coeff and nll_weight must be non-negative".into());
        }
        Ok(())
    }

    pub fn sets_per_step(&self) -> usize {
        match self.algorithm {
            Algorithm::Grpo => self.group_size,
            Algorithm::Dpo | Algorithm::Simpo => 2,
            Algorithm::Sft => 0,
        }
    }

    pub fn optimizer(&self) -> Result<Optimizer> {
        Optimizer::new(LrSchedule {
            base_lr: self.lr,
            warmup_steps: self.warmup_steps,
            total_steps: self.steps as u64,
        })
        .map(|o| o.with_rule(self.update_rule))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleGroup {
    pub sets: Vec<CandidateSet>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub example_id: String,
    pub algorithm: Algorithm,
    /// Rewards of the sets first drawn at this step, in draw order.
    pub rewards: Vec<f64>,
    pub loss_nll: f64,
    pub loss_rl: f64,
    pub abstained: bool,
    pub resamples: usize,
    pub policy_version: u64,
    pub wall_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl StepRecord {
    pub fn mean_reward(&self) -> Option<f64> {
        (!self.rewards.is_empty()).then(|| self.rewards.iter().sum::<f64>() / self.rewards.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub step: usize,
    pub ndcg10: f64,
}

/// Sidecar written next to the best checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub best_val_ndcg10: Option<f64>,
    pub step: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the best validation NDCG@10 (the final ones when no
    /// validation split is given).
    pub best: RetrieverParams,
    pub best_step: usize,
    pub best_val_ndcg10: Option<f64>,
    pub last: RetrieverParams,
    pub log: Vec<StepRecord>,
    pub validations: Vec<Validation>,
    pub abstentions: usize,
    pub failures: usize,
    /// Examples dropped up front for lacking history or targets.
    pub skipped_empty: usize,
}

impl TrainOutcome {
    /// Mean of per-step mean rewards over `range` of the log.
    pub fn mean_reward(&self, range: std::ops::Range<usize>) -> Option<f64> {
        let r: Vec<f64> = self.log[range].iter().filter_map(StepRecord::mean_reward).collect();
        (!r.is_empty()).then(|| r.iter().sum::<f64>() / r.len() as f64)
    }
}

/// Validation inputs for checkpoint selection.
pub struct Validator<'a> {
    pub examples: &'a [TrainingExample],
    pub train_counts: &'a HashMap<String, usize>,
    pub eval: &'a EvalConfig,
}

struct Forward {
    query: Array1<f64>,
    trace: crate::retriever::HiddenTrace,
    pool: Pool,
}

fn forward(params: &RetrieverParams, env: &RecEnv<'_>, ex: &TrainingExample, cfg: &TrainConfig, step: usize) -> Result<Forward> {
    let e = env.table.sequence(&ex.history_items)?;
    let dropout_seed = SeedStream::new(cfg.seed).stream(DROPOUT).index(step as u64).value();
    let (qs, trace) = forward_all(params, &e, true, dropout_seed, Recurrence::Sequential)?;
    let query = qs.row(qs.nrows() - 1).to_owned();
    let full = score_corpus(query.view(), env.table, None, env.exec)?;
    let history: HashSet<String> = ex.history_items.iter().cloned().collect();
    let pool = if cfg.pool_size == 0 {
        full.without(&history, "full-minus-history")
    } else {
        full.shortlist(cfg.pool_size, &history, format!("top{}", cfg.pool_size))
    };
    if pool.len() < cfg.k {
        return Err(RarError::InsufficientPool {
            required: cfg.k,
            available: pool.len(),
        });
    }
    Ok(Forward { query, trace, pool })
}

/// Sampler pool extended with any target it misses, so the anchor always
/// has its targets in the denominator.
fn nll_pool(env: &RecEnv<'_>, fwd: &Forward, targets: &[String]) -> Result<Pool> {
    let missing: Vec<String> = targets.iter().filter(|t| fwd.pool.position(t).is_none()).cloned().collect();
    let mut pool = fwd.pool.clone();
    if !missing.is_empty() {
        let extra = score_corpus(fwd.query.view(), env.table, Some(&missing), crate::Exec::Sequential)?;
        pool.ids.extend(extra.ids);
        pool.rows.extend(extra.rows);
        pool.scores.extend(extra.scores);
    }
    Ok(pool)
}

fn draw(pool: &Pool, n: usize, cfg: &TrainConfig, version: u64, rng: &mut Rng) -> Result<Vec<CandidateSet>> {
    (0..n)
        .map(|_| {
            let mut s = sample_set(pool, cfg.k, cfg.temperature, rng)?;
            s.policy_version = version;
            Ok(s)
        })
        .collect()
}

fn score_sets(env: &RecEnv<'_>, ex: &TrainingExample, sets: Vec<CandidateSet>, k: usize) -> Result<Vec<ScoredSet>> {
    let rewards = env.exec.try_map(&sets, |s| -> Result<f64> {
        let ranked = env.rank(&ex.context, &s.items, k)?;
        if ranked.items.len() < s.items.len() {
            log::debug!("{}: generator returned {} of {} candidates", ex.id, ranked.items.len(), s.items.len());
        }
        ndcg_reward(&ranked, &ex.targets, k)
    })?;
    Ok(sets.into_iter().zip(rewards).map(|(s, r)| ScoredSet::new(s, r, &ex.targets)).collect())
}

/// d logp / d raw pool scores for a set drawn at `temperature`.
fn logp_grad(pool: &Pool, set: &CandidateSet, temperature: f64) -> Result<Vec<f64>> {
    let pos = pool.positions(&set.items)?;
    let scaled: Vec<f64> = pool.scores.iter().map(|s| s / temperature).collect();
    let mut g = set_log_prob_grad(&scaled, &pos)?;
    g.iter_mut().for_each(|x| *x /= temperature);
    Ok(g)
}

fn reference_logps(
    reference: &RetrieverParams,
    env: &RecEnv<'_>,
    ex: &TrainingExample,
    pool: &Pool,
    sets: &[&CandidateSet],
    temperature: f64,
) -> Result<Vec<f64>> {
    let e = env.table.sequence(&ex.history_items)?;
    let (qs, _) = forward_all(reference, &e, false, 0, Recurrence::Sequential)?;
    let q = qs.row(qs.nrows() - 1);
    let scaled: Vec<f64> = pool.rows.iter().map(|&r| env.table.row(r).dot(&q) / temperature).collect();
    sets.iter().map(|s| set_log_prob(&scaled, &pool.positions(&s.items)?)).collect()
}

fn check_on_policy(sets: &[&CandidateSet], params: &RetrieverParams) -> Result<()> {
    match sets.iter().find(|s| s.policy_version != params.version) {
        Some(s) => Err(RarError::OffPolicy {
            sampled: s.policy_version,
            current: params.version,
        }),
        None => Ok(()),
    }
}

struct StepResult {
    record: StepRecord,
    abstained: bool,
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    params: &mut RetrieverParams,
    opt: &mut Optimizer,
    reference: Option<&RetrieverParams>,
    env: &RecEnv<'_>,
    ex: &TrainingExample,
    cfg: &TrainConfig,
    step: usize,
) -> Result<StepResult> {
    let start = Instant::now();
    let version = params.version;
    let fwd = forward(params, env, ex, cfg, step)?;
    let mut rng = SeedStream::new(cfg.seed).stream(SAMPLER).index(step as u64).rng();

    let first = draw(&fwd.pool, cfg.sets_per_step(), cfg, version, &mut rng)?;
    let scored = score_sets(env, ex, first, cfg.k)?;
    let rewards: Vec<f64> = scored.iter().map(|s| s.reward).collect();

    // RL term: per-set weights on d logp
    let mut weighted: Vec<(CandidateSet, f64)> = Vec::new();
    let mut loss_rl = 0.0;
    let mut abstained = false;
    let mut resamples = 0;
    match cfg.algorithm {
        Algorithm::Sft => {}
        Algorithm::Dpo | Algorithm::Simpo => {
            let mut it = scored.into_iter();
            let (a, b) = (it.next().expect("two sets"), it.next().expect("two sets"));
            let annotation = annotate_pair(a, b, cfg.max_resamples, |_| {
                let fresh = draw(&fwd.pool, 2, cfg, version, &mut rng)?;
                let mut s = score_sets(env, ex, fresh, cfg.k)?.into_iter();
                Ok((s.next().expect("two sets"), s.next().expect("two sets")))
            })?;
            match annotation {
                Annotation::Abstain { resamples_used, .. } => {
                    abstained = true;
                    resamples = resamples_used;
                }
                Annotation::Pair(pair) => {
                    resamples = pair.resamples_used;
                    let refs = match reference {
                        Some(r) => {
                            let v = reference_logps(r, env, ex, &fwd.pool, &[&pair.winner, &pair.loser], cfg.temperature)?;
                            Some((v[0], v[1]))
                        }
                        None => None,
                    };
                    let pl = if cfg.algorithm == Algorithm::Dpo {
                        dpo_loss(pair.winner.log_prob, pair.loser.log_prob, refs, cfg.beta)?
                    } else {
                        simpo_loss(pair.winner.log_prob, pair.loser.log_prob, cfg.beta, cfg.gamma)?
                    };
                    loss_rl = pl.loss;
                    weighted.push((pair.winner, pl.d_winner));
                    weighted.push((pair.loser, pl.d_loser));
                }
            }
        }
        Algorithm::Grpo => {
            let group = SampleGroup {
                advantages: grpo_advantages(&rewards, DEFAULT_ADV_EPS),
                rewards: rewards.clone(),
                sets: scored.into_iter().map(|s| s.set).collect(),
            };
            let logps: Vec<f64> = group.sets.iter().map(|s| s.log_prob).collect();
            let refs = match (reference, cfg.kl_coeff > 0.0) {
                (Some(r), true) => Some(reference_logps(r, env, ex, &fwd.pool, &group.sets.iter().collect::<Vec<_>>(), cfg.temperature)?),
                _ => None,
            };
            let gl = grpo_loss(&logps, &group.advantages, cfg.kl_coeff, refs.as_deref())?;
            loss_rl = gl.loss;
            weighted.extend(group.sets.into_iter().zip(gl.grads));
        }
    }

    check_on_policy(&weighted.iter().map(|(s, _)| s).collect::<Vec<_>>(), params)?;

    let mut rl_grad = vec![0.0; fwd.pool.len()];
    for (set, w) in &weighted {
        if *w != 0.0 {
            for (acc, g) in rl_grad.iter_mut().zip(logp_grad(&fwd.pool, set, cfg.temperature)?) {
                *acc += w * g;
            }
        }
    }
    let npool = nll_pool(env, &fwd, &ex.targets)?;
    let (loss_nll, nll_grad) = nll_loss(&npool.scores, &npool.positions(&ex.targets)?)?;
    let total = cfg.nll_weight * loss_nll + loss_rl;
    if !total.is_finite() {
        return Err(RarError::NonFinite(format!(
            "loss at step {step} ({}): nll {loss_nll}, rl {loss_rl}",
            ex.id
        )));
    }
    let scaled_nll: Vec<f64> = nll_grad.iter().map(|g| g * cfg.nll_weight).collect();
    let dq = query_gradient(env.table, &npool, &scaled_nll) + query_gradient(env.table, &fwd.pool, &rl_grad);
    let last = fwd.trace.len() - 1;
    let grads = backward::backward(params, &fwd.trace, &[(last, dq)]);
    opt.apply(params, &grads)?;

    Ok(StepResult {
        abstained,
        record: StepRecord {
            step,
            example_id: ex.id.clone(),
            algorithm: cfg.algorithm,
            rewards,
            loss_nll,
            loss_rl,
            abstained,
            resamples,
            policy_version: version,
            wall_ms: start.elapsed().as_millis() as u64,
            failure: None,
        },
    })
}

fn is_generator_failure(e: &RarError) -> bool {
    matches!(e, RarError::Transport { .. } | RarError::Protocol { .. } | RarError::Provider { .. })
}

/// Runs `cfg.steps` on-policy updates over a seeded ordering of `dataset`
/// (cycling if needed), validating every `cfg.eval_every` steps and at the end.
pub fn train_rl(
    dataset: &[TrainingExample],
    params: RetrieverParams,
    env: &RecEnv<'_>,
    cfg: &TrainConfig,
    validator: Option<&Validator<'_>>,
    config_hash: &str,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let usable: Vec<&TrainingExample> = dataset
        .iter()
        .filter(|e| !e.history_items.is_empty() && !e.targets.is_empty())
        .collect();
    let skipped_empty = dataset.len() - usable.len();
    if usable.is_empty() {
        return Err(RarError::invalid("no training example has both history and targets"));
    }
    let mut order: Vec<usize> = (0..usable.len()).collect();
    order.shuffle(&mut SeedStream::new(cfg.seed).stream("order").rng());

    let reference = cfg.use_reference.then(|| params.clone());
    let mut params = params;
    let mut opt = cfg.optimizer()?;
    let mut log = Vec::with_capacity(cfg.steps);
    let mut validations = Vec::new();
    let (mut abstentions, mut failures) = (0, 0);
    let mut best: Option<(f64, usize, RetrieverParams)> = None;

    let mut validate = |params: &RetrieverParams, step: usize, validations: &mut Vec<Validation>| -> Result<()> {
        if let Some(v) = validator {
            let report = evaluate(params, env, v.examples, v.train_counts, v.eval, config_hash, cfg.seed)?;
            let ndcg10 = report.ndcg10();
            log::info!("step {step}: validation N@10 {ndcg10:.4}");
            validations.push(Validation { step, ndcg10 });
            if best.as_ref().is_none_or(|(b, _, _)| ndcg10 > *b) {
                best = Some((ndcg10, step, params.clone()));
            }
        }
        Ok(())
    };

    for step in 0..cfg.steps {
        let ex = usable[order[step % order.len()]];
        let record = match train_step(&mut params, &mut opt, reference.as_ref(), env, ex, cfg, step) {
            Ok(r) => {
                abstentions += r.abstained as usize;
                r.record
            }
            Err(e) if is_generator_failure(&e) => {
                log::warn!("step {step}: skipping {} after generator failure: {e}", ex.id);
                failures += 1;
                StepRecord {
                    step,
                    example_id: ex.id.clone(),
                    algorithm: cfg.algorithm,
                    rewards: vec![],
                    loss_nll: 0.0,
                    loss_rl: 0.0,
                    abstained: false,
                    resamples: 0,
                    policy_version: params.version,
                    wall_ms: 0,
                    failure: Some(e.to_string()),
                }
            }
            Err(e) => return Err(e),
        };
        on_step(&record);
        log.push(record);
        let done = step + 1;
        if cfg.eval_every > 0 && done % cfg.eval_every == 0 && done != cfg.steps {
            validate(&params, done, &mut validations)?;
        }
    }
    validate(&params, cfg.steps, &mut validations)?;

    let (best_val, best_step, best_params) = match best {
        Some((v, s, p)) => (Some(v), s, p),
        None => (None, cfg.steps, params.clone()),
    };
    Ok(TrainOutcome {
        best: best_params,
        best_step,
        best_val_ndcg10: best_val,
        last: params,
        log,
        validations,
        abstentions,
        failures,
        skipped_empty,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn algorithm_names_round_trip() {
        for a in [Algorithm::Dpo, Algorithm::Simpo, Algorithm::Grpo, Algorithm::Sft] {
            assert_eq!(a.name().parse::<Algorithm>().unwrap(), a);
            assert_eq!(serde_json::to_string(&a).unwrap(), format!("\"{a}\""));
        }
        assert!("ppo".parse::<Algorithm>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { beta: 0.0, ..Default::default() },
            TrainConfig { group_size: 1, ..Default::default() },
            TrainConfig { k: 300, ..Default::default() },
            TrainConfig { gamma: -0.1, ..Default::default() },
            TrainConfig { temperature: 0.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
        assert!(TrainConfig { pool_size: 0, k: 300, ..Default::default() }.validate().is_ok());
    }

    #[test]
    fn off_policy_sets_are_rejected() {
        let p = RetrieverParams::init(
            crate::retriever::RetrieverShape {
                dim: 4,
                hidden: 2,
                num_layers: 1,
                dropout_rate: 0.0,
            },
            0,
        )
        .unwrap();
        let mut s = CandidateSet {
            items: vec!["a".into()],
            scores: vec![0.0],
            pool_tag: "t".into(),
            log_prob: 0.0,
            policy_version: p.version,
        };
        assert!(check_on_policy(&[&s], &p).is_ok());
        s.policy_version += 1;
        assert!(matches!(check_on_policy(&[&s], &p), Err(RarError::OffPolicy { .. })));
    }
}

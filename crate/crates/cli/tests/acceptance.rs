//! Acceptance suite. Runs every criterion, prints one line per criterion and
//! exits non-zero if any fails.

use std::collections::HashMap;
use std::path::Path;
use std::time::{Duration, Instant};

use ndarray::Array1;
use rand::Rng as _;
use rar_cli::commands::{cmd_simulate, layout, train_counts, Runtime, SimulationOutcome};
use rar_cli::config::RunConfig;
use rar_core::corpus::{fuzzy_similarity, FUZZY_THRESHOLD};
use rar_core::datasets::TrainingExample;
use rar_core::eval::{evaluate, RecEnv};
use rar_core::generator::{Generator, PromptSpec};
use rar_core::jsonl;
use rar_core::metrics::{ndcg_at_k, recall_at_k};
use rar_core::preference::losses::DEFAULT_ADV_EPS;
use rar_core::preference::{annotate_pair, dpo_loss, grpo_advantages, simpo_loss, Algorithm, Annotation, ScoredSet};
use rar_core::retriever::backward::backward;
use rar_core::retriever::{forward_all, Recurrence, RetrieverParams, RetrieverShape};
use rar_core::sampler::{sample_positions, set_log_prob, set_log_prob_grad, CandidateSet};
use rar_core::seed::{Rng, SeedStream};
use rar_core::{Exec, Result};

type Check = std::result::Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rng(name: &str) -> Rng {
    SeedStream::new(20_240_601).stream(name).rng()
}

fn uniform(rng: &mut Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn c1_plackett_luce() -> Check {
    let start = Instant::now();
    let scores = [0.3, -1.2, 2.0, 0.0, 0.7, -0.4];
    let mut exact = HashMap::new();
    for a in 0..6 {
        for b in 0..6 {
            for c in 0..6 {
                if a != b && b != c && a != c {
                    exact.insert([a, b, c], set_log_prob(&scores, &[a, b, c]).unwrap().exp());
                }
            }
        }
    }
    let total: f64 = exact.values().sum();
    let n = 200_000;
    let mut r = rng("c1");
    let mut counts: HashMap<[usize; 3], usize> = HashMap::new();
    for _ in 0..n {
        let p = sample_positions(&scores, 3, 1.0, &mut r).unwrap();
        *counts.entry([p[0], p[1], p[2]]).or_default() += 1;
    }
    let tv = 0.5
        * exact
            .iter()
            .map(|(t, p)| (counts.get(t).copied().unwrap_or(0) as f64 / n as f64 - p).abs())
            .sum::<f64>();
    let secs = start.elapsed().as_secs_f64();
    ensure(
        exact.len() == 120 && (total - 1.0).abs() <= 1e-9 && tv <= 0.02 && secs < 60.0,
        format!("{} triples, |sum-1| = {:.1e}, TV = {tv:.4}, {secs:.1}s", exact.len(), (total - 1.0).abs()),
    )
}

fn c2_likelihood_gradient() -> Check {
    let mut r = rng("c2");
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let s = uniform(&mut r, 20, 2.0);
        let mut chosen: Vec<usize> = Vec::new();
        while chosen.len() < 5 {
            let c = r.random_range(0..20);
            if !chosen.contains(&c) {
                chosen.push(c);
            }
        }
        let g = set_log_prob_grad(&s, &chosen).unwrap();
        let fd: Vec<f64> = (0..20)
            .map(|j| {
                let (mut p, mut m) = (s.clone(), s.clone());
                p[j] += h;
                m[j] -= h;
                (set_log_prob(&p, &chosen).unwrap() - set_log_prob(&m, &chosen).unwrap()) / (2.0 * h)
            })
            .collect();
        worst = worst.max(rel_err(&g, &fd));
    }
    ensure(worst <= 1e-4, format!("worst relative error {worst:.2e} over 20 instances"))
}

/// `||a - b|| / max(||a||, ||b||)`.
fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(f64::MIN_POSITIVE)
}

fn embeddings(r: &mut Rng, t: usize, dim: usize) -> Vec<Array1<f64>> {
    (0..t).map(|_| Array1::from(uniform(r, dim, 1.0))).collect()
}

fn c3_scan_equivalence() -> Check {
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let params = RetrieverParams::init(
            RetrieverShape {
                dim: 16,
                hidden: 8,
                num_layers: 2,
                dropout_rate: 0.0,
            },
            seed,
        )
        .unwrap();
        let mut r = rng(&format!("c3-{seed}"));
        for t in [1, 2, 3, 7, 64, 256] {
            let e = embeddings(&mut r, t, 16);
            let (a, _) = forward_all(&params, &e, false, 0, Recurrence::Sequential).unwrap();
            for exec in [Exec::Sequential, Exec::Parallel] {
                let (b, _) = forward_all(&params, &e, false, 0, Recurrence::Scan(exec)).unwrap();
                worst = worst.max((&a - &b).iter().fold(0.0, |m, x| m.max(x.abs())));
            }
        }
    }
    ensure(worst <= 1e-6, format!("max abs difference {worst:.2e}"))
}

fn c4_retriever_gradient() -> Check {
    let mut worst: f64 = 0.0;
    for layers in [1, 2] {
        let mut params = RetrieverParams::init(
            RetrieverShape {
                dim: 6,
                hidden: 4,
                num_layers: layers,
                dropout_rate: 0.0,
            },
            7,
        )
        .unwrap();
        let mut r = rng(&format!("c4-{layers}"));
        let e = embeddings(&mut r, 3, 6);
        let w: Vec<Array1<f64>> = (0..3).map(|_| Array1::from(uniform(&mut r, 6, 1.0))).collect();
        let loss = |p: &RetrieverParams| {
            let (q, _) = forward_all(p, &e, false, 0, Recurrence::Sequential).unwrap();
            (0..3).map(|t| q.row(t).dot(&w[t])).sum::<f64>()
        };
        let (_, trace) = forward_all(&params, &e, false, 0, Recurrence::Sequential).unwrap();
        let seeds: Vec<(usize, Array1<f64>)> = w.iter().cloned().enumerate().collect();
        let analytic = backward(&params, &trace, &seeds).flatten();
        let theta = params.flatten();
        let h = 1e-6;
        let mut fd = Vec::with_capacity(theta.len());
        for i in 0..theta.len() {
            let mut t = theta.clone();
            t[i] = theta[i] + h;
            params.assign_flat(&t);
            let up = loss(&params);
            t[i] = theta[i] - h;
            params.assign_flat(&t);
            let down = loss(&params);
            fd.push((up - down) / (2.0 * h));
        }
        params.assign_flat(&theta);
        worst = worst.max(rel_err(&analytic, &fd));
    }
    ensure(worst <= 1e-4, format!("relative error {worst:.2e} over every parameter"))
}

fn c5_loss_identities() -> Check {
    let ln2 = std::f64::consts::LN_2;
    let dpo = dpo_loss(-3.2, -3.2, None, 0.05).unwrap().loss;
    let simpo = simpo_loss(-1.0, -3.0, 0.5, 1.0).unwrap().loss;
    let adv = grpo_advantages(&[1.0, 0.0, 1.0, 0.0], DEFAULT_ADV_EPS);
    let flat = grpo_advantages(&[0.4; 8], DEFAULT_ADV_EPS);
    ensure(
        (dpo - ln2).abs() <= 1e-12
            && (simpo - ln2).abs() <= 1e-12
            && adv == vec![1.0, -1.0, 1.0, -1.0]
            && flat.iter().all(|&a| a == 0.0),
        format!("dpo {dpo}, simpo {simpo}, advantages {adv:?}"),
    )
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("i{i}")).collect()
}

fn c6_metric_exactness() -> Check {
    let ranked = ids(25);
    let at3 = ndcg_at_k(&ranked, &["i2".into()], 10).unwrap();
    let mut monotone = true;
    for a in 0..25 {
        for b in a + 1..25 {
            let na = ndcg_at_k(&ranked, &[ranked[a].clone()], 25).unwrap();
            let nb = ndcg_at_k(&ranked, &[ranked[b].clone()], 25).unwrap();
            monotone &= na > nb;
        }
    }
    let mut r = rng("c6");
    let mut violations = 0;
    for _ in 0..10_000 {
        let mut list = ids(60);
        for i in (1..list.len()).rev() {
            list.swap(i, r.random_range(0..=i));
        }
        let targets: Vec<String> = (0..r.random_range(1..4)).map(|_| format!("i{}", r.random_range(0..60))).collect();
        let k = r.random_range(1..=30);
        if ndcg_at_k(&list, &targets, k).unwrap() > recall_at_k(&list, &targets, k).unwrap() {
            violations += 1;
        }
    }
    ensure(
        at3 == 0.5 && monotone && violations == 0,
        format!("rank 3 -> {at3}, monotone {monotone}, {violations} ndcg > recall"),
    )
}

const GARBLE: &str = "Xqvz Kwyth Pfjj Zzmq";

/// Passes another generator's answer through, cut to twenty lines with the
/// tenth and twentieth replaced.
struct Corrupt<'a>(&'a dyn Generator);

impl Generator for Corrupt<'_> {
    fn generate(&self, prompt: &PromptSpec) -> Result<String> {
        let text = self.0.generate(prompt)?;
        Ok(text
            .lines()
            .filter(|l| l.trim_start().starts_with(|c: char| c.is_ascii_digit()))
            .take(20)
            .enumerate()
            .map(|(i, l)| if i % 10 == 9 { format!("{}. {GARBLE}", i + 1) } else { l.to_string() })
            .collect::<Vec<_>>()
            .join("\n"))
    }
}

fn c9_hallucination(cfg: &RunConfig, run: &SimulationOutcome) -> Check {
    let rt = Runtime::load(cfg).map_err(|e| e.to_string())?;
    let below = rt.corpus.entries().all(|e| fuzzy_similarity(GARBLE, &e.title) < FUZZY_THRESHOLD);
    let test: Vec<TrainingExample> = jsonl::read(&layout(cfg).split("test")).map_err(|e| e.to_string())?;
    let counts = train_counts(cfg).map_err(|e| e.to_string())?;
    let corrupt = Corrupt(rt.generator.as_ref());
    let env = RecEnv {
        generator: &corrupt,
        ..rt.env(Exec::Parallel)
    };
    let params = rar_core::retriever::checkpoint::Checkpoint::load(&layout(cfg).trained(Algorithm::Dpo))
        .map_err(|e| e.to_string())?
        .params;
    let r = evaluate(&params, &env, &test, &counts, &cfg.eval, "c9", 0).map_err(|e| e.to_string())?;
    let clean = run.rl_report.hallucination_rate;
    ensure(
        clean == 0.0 && below && (r.hallucination_rate - 0.10).abs() <= 0.02,
        format!("mock {clean}, corrupted {:.4}, garble below threshold {below}", r.hallucination_rate),
    )
}

fn c11_annotation() -> Check {
    let targets = vec!["t".to_string()];
    let set = |items: &[&str]| CandidateSet {
        items: items.iter().map(|s| s.to_string()).collect(),
        scores: vec![0.0; items.len()],
        pool_tag: "fixture".into(),
        log_prob: 0.0,
        policy_version: 0,
    };
    let scored = |items: &[&str], reward: f64| ScoredSet::new(set(items), reward, &targets);
    let never = |_: usize| -> Result<(ScoredSet, ScoredSet)> { panic!("no resample expected") };
    let mut failures = Vec::new();

    // both hold a label: the higher reward wins
    match annotate_pair(scored(&["a", "t"], 0.63), scored(&["t", "b"], 1.0), 8, never).unwrap() {
        Annotation::Pair(p) if p.winner.items == ["t", "b"] && p.rewards == (1.0, 0.63) && p.resamples_used == 0 => {}
        other => failures.push(format!("both-label: {other:?}")),
    }
    // only one holds a label: it wins whatever the rewards say
    match annotate_pair(scored(&["a", "b"], 0.9), scored(&["c", "t"], 0.2), 8, never).unwrap() {
        Annotation::Pair(p) if p.winner.items == ["c", "t"] && p.resamples_used == 0 => {}
        other => failures.push(format!("one-label: {other:?}")),
    }
    // neither: resample, succeeding on the third draw
    let mut calls = 0;
    let resolved = annotate_pair(scored(&["a"], 0.0), scored(&["b"], 0.0), 8, |i| {
        calls += 1;
        Ok(if i < 3 {
            (scored(&["c"], 0.0), scored(&["d"], 0.0))
        } else {
            (scored(&["e"], 0.0), scored(&["t"], 1.0))
        })
    })
    .unwrap();
    match resolved {
        Annotation::Pair(p) if p.winner.items == ["t"] && p.resamples_used == 3 && calls == 3 => {}
        other => failures.push(format!("resolved after resampling: {other:?} ({calls} calls)")),
    }
    // neither, forever: abstain at the cap
    let mut calls = 0;
    let gave_up = annotate_pair(scored(&["a"], 0.0), scored(&["b"], 0.0), 8, |_| {
        calls += 1;
        Ok((scored(&["c"], 0.0), scored(&["d"], 0.0)))
    })
    .unwrap();
    match gave_up {
        Annotation::Abstain { resamples_used: 8, .. } if calls == 8 => {}
        other => failures.push(format!("abstain: {other:?} ({calls} calls)")),
    }
    // a tie between labelled sets also resamples
    let mut calls = 0;
    let tie = annotate_pair(scored(&["t"], 0.5), scored(&["t", "a"], 0.5), 2, |_| {
        calls += 1;
        Ok((scored(&["t"], 0.5), scored(&["t", "a"], 0.5)))
    })
    .unwrap();
    if !(tie.is_abstain() && calls == 2) {
        failures.push(format!("tie: {tie:?} ({calls} calls)"));
    }
    ensure(failures.is_empty(), if failures.is_empty() { "all rules reproduced".into() } else { failures.join("; ") })
}

fn simulate(root: &Path, overrides: &[(&str, &str)]) -> std::result::Result<(RunConfig, SimulationOutcome, Duration), String> {
    let mut pairs: Vec<(String, String)> = vec![("paths.root".into(), root.display().to_string())];
    pairs.extend(overrides.iter().map(|(k, v)| (k.to_string(), v.to_string())));
    let cfg = RunConfig::default()
        .with_overrides(&pairs)
        .and_then(|c| c.finalize())
        .map_err(|e| e.to_string())?;
    let start = Instant::now();
    let out = cmd_simulate(&cfg).map_err(|e| e.to_string())?;
    Ok((cfg, out, start.elapsed()))
}

fn last_and_first(run: &SimulationOutcome) -> (f64, f64) {
    let n = run.rl.log.len();
    (
        run.rl.mean_reward(0..100.min(n)).unwrap_or(f64::NAN),
        run.rl.mean_reward(n.saturating_sub(100)..n).unwrap_or(f64::NAN),
    )
}

fn c7_alignment(run: &SimulationOutcome, elapsed: Duration) -> Check {
    let (first, last) = last_and_first(run);
    let rl = run.rl_report.ndcg10();
    let sft = run.baseline.as_ref().map_or(f64::NAN, |(_, r)| r.ndcg10());
    let mins = elapsed.as_secs_f64() / 60.0;
    let shape_ok = run.preprocess.train == 2000 && run.rl.log.len() == 500;
    ensure(
        shape_ok && last > first && rl >= sft && mins < 10.0,
        format!(
            "reward first-100 {first:.4} -> last-100 {last:.4}; test N@10 dpo {rl:.4} vs sft {sft:.4}; {} train examples; {mins:.1} min",
            run.preprocess.train
        ),
    )
}

fn c8_grpo(dpo: &SimulationOutcome, grpo: &SimulationOutcome) -> Check {
    let (_, d) = last_and_first(dpo);
    let (_, g) = last_and_first(grpo);
    ensure(
        g >= 0.95 * d,
        format!("last-100 mean reward grpo {g:.4} vs 0.95 x dpo {:.4}", 0.95 * d),
    )
}

fn c10_determinism(a: &RunConfig, b: &RunConfig) -> Check {
    let read = |c: &RunConfig| std::fs::read(layout(c).report("dpo")).map_err(|e| e.to_string());
    let (x, y) = (read(a)?, read(b)?);
    ensure(x == y, format!("eval_dpo.json {} bytes, identical {}", x.len(), x == y))
}

fn main() {
    let dirs: Vec<tempfile::TempDir> = (0..3).map(|_| tempfile::tempdir().expect("tempdir")).collect();
    let (sims, quick) = std::thread::scope(|s| {
        let a = s.spawn(|| simulate(dirs[0].path(), &[]));
        let b = s.spawn(|| simulate(dirs[1].path(), &[]));
        let g = s.spawn(|| simulate(dirs[2].path(), &[("train.algorithm", "grpo"), ("simulate.baseline", "false")]));
        let quick = vec![
            c1_plackett_luce(),
            c2_likelihood_gradient(),
            c3_scan_equivalence(),
            c4_retriever_gradient(),
            c5_loss_identities(),
            c6_metric_exactness(),
        ];
        ([a, b, g].map(|h| h.join().expect("simulation thread")), quick)
    });
    let [a, b, g] = sims;

    let mut results: Vec<(usize, &str, Check)> = Vec::new();
    let names = [
        "Plackett-Luce exactness",
        "likelihood gradient",
        "scan equivalence",
        "retriever training gradient",
        "loss identities",
        "reward/metric exactness",
    ];
    for (i, (name, r)) in names.into_iter().zip(quick).enumerate() {
        results.push((i + 1, name, r));
    }
    let fail = |e: &String| Err(format!("simulation failed: {e}"));
    results.push((
        7,
        "end-to-end alignment signal",
        match &a {
            Ok((_, run, t)) => c7_alignment(run, *t),
            Err(e) => fail(e),
        },
    ));
    results.push((
        8,
        "GRPO parity",
        match (&a, &g) {
            (Ok((_, d, _)), Ok((_, gr, _))) => c8_grpo(d, gr),
            (Err(e), _) | (_, Err(e)) => fail(e),
        },
    ));
    results.push((
        9,
        "hallucination instrumentation",
        match &a {
            Ok((cfg, run, _)) => c9_hallucination(cfg, run),
            Err(e) => fail(e),
        },
    ));
    results.push((
        10,
        "determinism",
        match (&a, &b) {
            (Ok((ca, _, _)), Ok((cb, _, _))) => c10_determinism(ca, cb),
            (Err(e), _) | (_, Err(e)) => fail(e),
        },
    ));
    results.push((11, "pair-annotation protocol", c11_annotation()));

    let mut failed = 0;
    for (n, name, r) in &results {
        match r {
            Ok(d) => println!("criterion {n:>2} PASS  {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {d}");
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

//! Stacked diagonal linear-recurrence retriever.
//!
//! Each layer runs `h_t = diag(lambda) h_{t-1} + B x_t`, `o_t = C h_t + x_t`
//! over its input sequence. The first layer's input is `x = w_in^T e`, the
//! query is `w_out^T y_T` of the top layer, and dropout acts on layer
//! outputs. `lambda = LAMBDA_MAX * tanh(raw)` keeps the recurrence stable.

pub mod backward;
pub mod checkpoint;
pub mod optim;
pub mod pretrain;
pub mod scan;

use std::collections::HashSet;

use ndarray::{s, Array1, Array2, ArrayView1};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingTable;
use crate::error::{RarError, Result};
use crate::exec::Exec;
use crate::sampler::Pool;
use crate::seed::{SeedStream, DROPOUT};

pub use backward::Grads;

pub const LAMBDA_MAX: f64 = 0.99;
pub const DEFAULT_LAYERS: usize = 2;
pub const DEFAULT_DROPOUT: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    /// Unconstrained recurrence coefficients; see [`LayerParams::lambda`].
    pub raw_lambda: Array1<f64>,
    pub b: Array2<f64>,
    pub c: Array2<f64>,
}

impl LayerParams {
    pub fn lambda(&self) -> Array1<f64> {
        self.raw_lambda.mapv(|r| LAMBDA_MAX * r.tanh())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrieverParams {
    pub dim: usize,
    pub hidden: usize,
    pub dropout_rate: f64,
    /// D x H
    pub w_in: Array2<f64>,
    pub layers: Vec<LayerParams>,
    /// H x D
    pub w_out: Array2<f64>,
    /// Incremented by every optimizer step.
    #[serde(default)]
    pub version: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetrieverShape {
    pub dim: usize,
    pub hidden: usize,
    pub num_layers: usize,
    pub dropout_rate: f64,
}

impl RetrieverParams {
    /// Random initialization: Glorot-scaled projections, recurrence
    /// magnitudes spread over [0.5, 0.9].
    pub fn init(shape: RetrieverShape, seed: u64) -> Result<Self> {
        let RetrieverShape {
            dim,
            hidden,
            num_layers,
            dropout_rate,
        } = shape;
        if dim == 0 || hidden == 0 || num_layers == 0 {
            return Err(RarError::invalid("dim, hidden and num_layers must be positive"));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(RarError::invalid("dropout rate must lie in [0, 1)"));
        }
        let mut rng = SeedStream::new(seed).stream(crate::seed::INIT).rng();
        let mut gauss = |rows: usize, cols: usize, std: f64| {
            let n = Normal::new(0.0, std).expect("positive std");
            Array2::from_shape_fn((rows, cols), |_| n.sample(&mut rng))
        };
        let w_in = gauss(dim, hidden, (2.0 / (dim + hidden) as f64).sqrt());
        let w_out = gauss(hidden, dim, (2.0 / (dim + hidden) as f64).sqrt());
        let mut layers = Vec::with_capacity(num_layers);
        for _ in 0..num_layers {
            let b = gauss(hidden, hidden, (0.5 / hidden as f64).sqrt());
            let c = gauss(hidden, hidden, (0.5 / hidden as f64).sqrt());
            layers.push(LayerParams {
                raw_lambda: Array1::zeros(hidden),
                b,
                c,
            });
        }
        for layer in &mut layers {
            for r in layer.raw_lambda.iter_mut() {
                let mag: f64 = rng.random_range(0.5..0.9);
                *r = (mag / LAMBDA_MAX).atanh();
            }
        }
        Ok(RetrieverParams {
            dim,
            hidden,
            dropout_rate,
            w_in,
            layers,
            w_out,
            version: 0,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_parameters(&self) -> usize {
        self.w_in.len() + self.w_out.len() + self.layers.iter().map(|l| l.raw_lambda.len() + l.b.len() + l.c.len()).sum::<usize>()
    }

    /// All parameters in a fixed order: w_in, per layer (raw_lambda, B, C), w_out.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_parameters());
        v.extend(self.w_in.iter());
        for l in &self.layers {
            v.extend(l.raw_lambda.iter());
            v.extend(l.b.iter());
            v.extend(l.c.iter());
        }
        v.extend(self.w_out.iter());
        v
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_parameters(), "flat parameter length");
        let mut it = flat.iter().copied();
        let mut fill = |dst: &mut dyn Iterator<Item = &mut f64>| {
            for x in dst {
                *x = it.next().expect("length checked");
            }
        };
        fill(&mut self.w_in.iter_mut());
        for l in &mut self.layers {
            fill(&mut l.raw_lambda.iter_mut());
            fill(&mut l.b.iter_mut());
            fill(&mut l.c.iter_mut());
        }
        fill(&mut self.w_out.iter_mut());
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|x| x.is_finite())
    }

    fn check_inputs(&self, embeddings: &[Array1<f64>]) -> Result<()> {
        if embeddings.is_empty() {
            return Err(RarError::invalid("retriever needs at least one history item"));
        }
        for e in embeddings {
            if e.len() != self.dim {
                return Err(RarError::Dimension {
                    expected: self.dim,
                    got: e.len(),
                });
            }
        }
        Ok(())
    }

    /// Inverted dropout masks, one T x H matrix per layer, drawn from `seed`.
    pub fn dropout_masks(&self, t: usize, seed: u64) -> Vec<Array2<f64>> {
        let keep = 1.0 - self.dropout_rate;
        (0..self.layers.len())
            .map(|l| {
                let mut rng = SeedStream::new(seed).stream(DROPOUT).index(l as u64).rng();
                Array2::from_shape_fn((t, self.hidden), |_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            })
            .collect()
    }
}

/// Everything the backward pass needs from a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenTrace {
    /// T x D stacked item embeddings.
    pub embeddings: Array2<f64>,
    /// Per layer, T x H inputs x.
    pub inputs: Vec<Array2<f64>>,
    /// Per layer, T x H hidden states h.
    pub states: Vec<Array2<f64>>,
    /// Per layer, T x H pre-dropout outputs o.
    pub outputs: Vec<Array2<f64>>,
    /// Per layer dropout masks, present only in train mode.
    pub masks: Option<Vec<Array2<f64>>>,
    /// T x H post-dropout output of the top layer.
    pub top: Array2<f64>,
    /// Associative combine operations used (0 for the sequential path).
    pub scan_combines: usize,
}

impl HiddenTrace {
    pub fn len(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Recurrence {
    Sequential,
    Scan(Exec),
}

/// Runs the stack and returns the query at every position (T x D) plus the trace.
pub fn forward_all(
    params: &RetrieverParams,
    embeddings: &[Array1<f64>],
    train_mode: bool,
    seed: u64,
    recurrence: Recurrence,
) -> Result<(Array2<f64>, HiddenTrace)> {
    params.check_inputs(embeddings)?;
    let t = embeddings.len();
    let mut e = Array2::zeros((t, params.dim));
    for (i, v) in embeddings.iter().enumerate() {
        e.row_mut(i).assign(v);
    }
    let masks = (train_mode && params.dropout_rate > 0.0).then(|| params.dropout_masks(t, seed));
    let mut x = e.dot(&params.w_in);
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut states = Vec::with_capacity(params.layers.len());
    let mut outputs = Vec::with_capacity(params.layers.len());
    let mut combines = 0;
    for (l, layer) in params.layers.iter().enumerate() {
        let lambda = layer.lambda();
        // u_t = B x_t, as rows
        let u = x.dot(&layer.b.t());
        let h = match recurrence {
            Recurrence::Sequential => {
                let mut h = Array2::zeros((t, params.hidden));
                let mut prev = Array1::zeros(params.hidden);
                for i in 0..t {
                    let cur = &lambda * &prev + &u.row(i);
                    h.row_mut(i).assign(&cur);
                    prev = cur;
                }
                h
            }
            Recurrence::Scan(exec) => {
                let (h, n) = scan::diagonal_recurrence(&lambda, &u, exec);
                combines += n;
                h
            }
        };
        let o = h.dot(&layer.c.t()) + &x;
        let y = match &masks {
            Some(m) => &o * &m[l],
            None => o.clone(),
        };
        inputs.push(std::mem::replace(&mut x, y));
        states.push(h);
        outputs.push(o);
    }
    let queries = x.dot(&params.w_out);
    Ok((
        queries,
        HiddenTrace {
            embeddings: e,
            inputs,
            states,
            outputs,
            masks,
            top: x,
            scan_combines: combines,
        },
    ))
}

/// Query for the last position, computed with the step-by-step recurrence.
pub fn forward_sequential(
    params: &RetrieverParams,
    embeddings: &[Array1<f64>],
    train_mode: bool,
    seed: u64,
) -> Result<(Array1<f64>, HiddenTrace)> {
    let (q, trace) = forward_all(params, embeddings, train_mode, seed, Recurrence::Sequential)?;
    Ok((q.row(q.nrows() - 1).to_owned(), trace))
}

/// Same contract as [`forward_sequential`], with the recurrence evaluated by
/// a work-efficient associative scan.
pub fn forward_scan(
    params: &RetrieverParams,
    embeddings: &[Array1<f64>],
    train_mode: bool,
    seed: u64,
    exec: Exec,
) -> Result<(Array1<f64>, HiddenTrace)> {
    let (q, trace) = forward_all(params, embeddings, train_mode, seed, Recurrence::Scan(exec))?;
    Ok((q.row(q.nrows() - 1).to_owned(), trace))
}

/// Inner products of the query with every table row (or only `pool` ids).
pub fn score_corpus(query: ArrayView1<'_, f64>, table: &EmbeddingTable, pool: Option<&[String]>, exec: Exec) -> Result<Pool> {
    if query.len() != table.dim() {
        return Err(RarError::Dimension {
            expected: table.dim(),
            got: query.len(),
        });
    }
    match pool {
        Some(ids) => {
            let rows = ids
                .iter()
                .map(|id| table.row_of(id).ok_or_else(|| RarError::UnknownId(id.clone())))
                .collect::<Result<Vec<_>>>()?;
            let scores = rows.iter().map(|&r| table.row(r).dot(&query)).collect();
            Ok(Pool {
                ids: ids.to_vec(),
                rows,
                scores,
                tag: format!("subset:{}", ids.len()),
            })
        }
        None => {
            let m = table.matrix();
            let scores: Vec<f64> = if exec.is_parallel() && m.nrows() >= 4096 {
                let chunk = 1024;
                let starts: Vec<usize> = (0..m.nrows()).step_by(chunk).collect();
                exec.map(&starts, |&s| {
                    let end = (s + chunk).min(m.nrows());
                    m.slice(s![s..end, ..]).dot(&query).to_vec()
                })
                .concat()
            } else {
                m.dot(&query).to_vec()
            };
            Ok(Pool {
                ids: table.ids().to_vec(),
                rows: (0..table.len()).collect(),
                scores,
                tag: "full".into(),
            })
        }
    }
}

/// Chains pool-score gradients onto the query: `dL/dq = sum_j g_j v_j`.
pub fn query_gradient(table: &EmbeddingTable, pool: &Pool, score_grads: &[f64]) -> Array1<f64> {
    let mut g = Array1::zeros(table.dim());
    for (&row, &w) in pool.rows.iter().zip(score_grads) {
        if w != 0.0 {
            g.scaled_add(w, &table.row(row));
        }
    }
    g
}

/// Deterministic retrieval helper: history in, ranked pool out, with the
/// history items themselves excluded.
pub fn score_history(params: &RetrieverParams, table: &EmbeddingTable, history: &[String], exec: Exec) -> Result<Pool> {
    let e = table.sequence(history)?;
    let (q, _) = forward_scan(params, &e, false, 0, Exec::Sequential)?;
    let pool = score_corpus(q.view(), table, None, exec)?;
    let exclude: HashSet<String> = history.iter().cloned().collect();
    Ok(pool.without(&exclude, "full-minus-history"))
}

#[cfg(test)]
pub(crate) fn row_norms(m: &Array2<f64>) -> Array1<f64> {
    m.map_axis(ndarray::Axis(1), |r| r.dot(&r).sqrt())
}

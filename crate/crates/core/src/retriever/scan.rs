//! Work-efficient (Brent-Kung) inclusive scan for `h_t = a ⊙ h_{t-1} + b_t`.
//!
//! Elements are affine maps `(a, b)`; composing "first then second" gives
//! `(a2 ⊙ a1, a2 ⊙ b1 + b2)`. The prefix composition applied to `h_0 = 0`
//! is just its `b` part. An up-sweep and a down-sweep use fewer than `2t`
//! combines in `O(log t)` levels; within a level every combine is independent.

use ndarray::{Array1, Array2};

use crate::exec::Exec;

#[derive(Clone, Debug, PartialEq)]
struct Affine {
    a: Array1<f64>,
    b: Array1<f64>,
}

fn combine(first: &Affine, second: &Affine) -> Affine {
    Affine {
        a: &second.a * &first.a,
        b: &second.a * &first.b + &second.b,
    }
}

// Levels with fewer combines than this run inline.
const PAR_LEVEL_MIN: usize = 64;

fn apply_level(xs: &mut [Affine], targets: &[usize], half: usize, exec: Exec) -> usize {
    let exec = if targets.len() >= PAR_LEVEL_MIN { exec } else { Exec::Sequential };
    let snapshot = &*xs;
    let updated = exec.map(targets, |&i| combine(&snapshot[i - half], &snapshot[i]));
    for (&i, v) in targets.iter().zip(updated) {
        xs[i] = v;
    }
    targets.len()
}

/// Inclusive scan over a sequence of affine maps. Returns the prefixes and
/// the number of combine operations performed.
fn inclusive_scan(mut xs: Vec<Affine>, exec: Exec) -> (Vec<Affine>, usize) {
    let n = xs.len();
    let mut combines = 0;
    let mut stride = 2;
    while stride <= n {
        let targets: Vec<usize> = (stride - 1..n).step_by(stride).collect();
        combines += apply_level(&mut xs, &targets, stride / 2, exec);
        stride *= 2;
    }
    stride /= 2;
    while stride >= 2 {
        let half = stride / 2;
        let targets: Vec<usize> = (stride - 1 + half..n).step_by(stride).collect();
        combines += apply_level(&mut xs, &targets, half, exec);
        stride /= 2;
    }
    (xs, combines)
}

/// Hidden states for all positions (rows of `u` are `B x_t`) and the combine count.
pub fn diagonal_recurrence(lambda: &Array1<f64>, u: &Array2<f64>, exec: Exec) -> (Array2<f64>, usize) {
    let elems: Vec<Affine> = u
        .rows()
        .into_iter()
        .map(|r| Affine {
            a: lambda.clone(),
            b: r.to_owned(),
        })
        .collect();
    let (prefix, combines) = inclusive_scan(elems, exec);
    let mut h = Array2::zeros(u.raw_dim());
    for (i, p) in prefix.into_iter().enumerate() {
        h.row_mut(i).assign(&p.b);
    }
    (h, combines)
}

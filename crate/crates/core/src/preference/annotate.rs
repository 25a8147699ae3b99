//! Turning two scored candidate sets into a preference pair.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::sampler::CandidateSet;

pub const DEFAULT_MAX_RESAMPLES: usize = 8;

/// A sampled set with its generator reward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSet {
    pub set: CandidateSet,
    pub reward: f64,
    /// Whether any target item is among the set's candidates.
    pub has_label: bool,
}

impl ScoredSet {
    pub fn new(set: CandidateSet, reward: f64, targets: &[String]) -> Self {
        let has_label = set.items.iter().any(|id| targets.contains(id));
        ScoredSet { set, reward, has_label }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub winner: CandidateSet,
    pub loser: CandidateSet,
    pub rewards: (f64, f64),
    pub resamples_used: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Annotation {
    Pair(PreferencePair),
    Abstain {
        resamples_used: usize,
        /// The last pair looked at before giving up.
        last_rewards: (f64, f64),
    },
}

impl Annotation {
    pub fn is_abstain(&self) -> bool {
        matches!(self, Annotation::Abstain { .. })
    }
}

fn decide(a: &ScoredSet, b: &ScoredSet) -> Option<bool> {
    match (a.has_label, b.has_label) {
        (true, false) => Some(true),
        (false, true) => Some(false),
        (true, true) if a.reward > b.reward => Some(true),
        (true, true) if b.reward > a.reward => Some(false),
        _ => None,
    }
}

/// Picks the winner of two sets:
/// a set holding a label beats one that does not; when both hold one, the
/// higher reward wins. Ties and label-free pairs call `resampler` for a fresh
/// pair, at most `max_resamples` times, after which the example abstains.
pub fn annotate_pair<F>(first: ScoredSet, second: ScoredSet, max_resamples: usize, mut resampler: F) -> Result<Annotation>
where
    F: FnMut(usize) -> Result<(ScoredSet, ScoredSet)>,
{
    let (mut a, mut b) = (first, second);
    let mut used = 0;
    loop {
        if let Some(a_wins) = decide(&a, &b) {
            let (w, l) = if a_wins { (a, b) } else { (b, a) };
            return Ok(Annotation::Pair(PreferencePair {
                rewards: (w.reward, l.reward),
                winner: w.set,
                loser: l.set,
                resamples_used: used,
            }));
        }
        if used == max_resamples {
            return Ok(Annotation::Abstain {
                resamples_used: used,
                last_rewards: (a.reward, b.reward),
            });
        }
        used += 1;
        (a, b) = resampler(used)?;
    }
}

//! Sequence-quality measurement used to build the training set: the log
//! prediction confidence of the anchor's ground truth, or binary accuracy
//! with confidence as the tie-breaker.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Example;
use crate::world::{Demo, SynthWorld};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    Confidence,
    /// Binary accuracy; ties are ordered by confidence.
    Accuracy,
}

/// A sequence score compared lexicographically: `primary`, then `secondary`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    pub primary: f64,
    pub secondary: f64,
}

impl Score {
    pub fn single(value: f64) -> Self {
        Self {
            primary: value,
            secondary: 0.0,
        }
    }

    pub fn total_cmp(&self, other: &Self) -> Ordering {
        self.primary
            .total_cmp(&other.primary)
            .then(self.secondary.total_cmp(&other.secondary))
    }
}

/// Anything that can score an ordered demonstration sequence for an anchor.
pub trait SequenceScorer: Sync {
    fn score(&self, seq: &[&Example], anchor: &Example) -> Score;
}

/// Scores sequences with the synthetic predictor.
#[derive(Debug, Clone, Copy)]
pub struct OracleScorer<'w> {
    pub world: &'w SynthWorld,
    pub kind: ScorerKind,
}

impl<'w> OracleScorer<'w> {
    pub fn new(world: &'w SynthWorld, kind: ScorerKind) -> Self {
        Self { world, kind }
    }
}

impl SequenceScorer for OracleScorer<'_> {
    fn score(&self, seq: &[&Example], anchor: &Example) -> Score {
        let conf = confidence(self.world, seq, anchor);
        match self.kind {
            ScorerKind::Confidence => Score::single(conf),
            ScorerKind::Accuracy => {
                let demos: Vec<Demo> = seq.iter().map(|e| Demo::from_example(e)).collect();
                Score {
                    primary: f64::from(self.world.oracle_accuracy(&demos, anchor)),
                    secondary: conf,
                }
            }
        }
    }
}

/// Log of the product over label tokens of the predictive probability of
/// each token given the sequence and the anchor's features.
///
/// Tokens are treated as conditionally independent given the task mixture,
/// so every factor comes from the same predictive distribution.
pub fn confidence(world: &SynthWorld, seq: &[&Example], anchor: &Example) -> f64 {
    if anchor.label.is_empty() {
        return 0.0;
    }
    let demos: Vec<Demo> = seq.iter().map(|e| Demo::from_example(e)).collect();
    let log_p = world.log_predict(&demos, &anchor.img_feat);
    anchor.label.iter().map(|&y| log_p[y]).sum()
}

fn check_not_in(partial: &[&Example], candidate: &Example) -> Result<()> {
    if partial.iter().any(|e| e.id == candidate.id) {
        return Err(Error::Precondition(format!(
            "candidate {} is already in the sequence",
            candidate.id
        )));
    }
    Ok(())
}

/// Improvement of the primary score from appending `candidate` at the end.
pub fn gain<S: SequenceScorer + ?Sized>(
    scorer: &S,
    partial: &[&Example],
    candidate: &Example,
    anchor: &Example,
) -> Result<f64> {
    check_not_in(partial, candidate)?;
    let base = scorer.score(partial, anchor);
    let mut extended = partial.to_vec();
    extended.push(candidate);
    Ok(scorer.score(&extended, anchor).primary - base.primary)
}

/// Candidate whose appending maximizes the gain; ties go to the lowest id.
///
/// The baseline term is shared by all candidates, so candidates are ranked
/// by the extended-sequence score directly, which also avoids rounding in
/// the subtraction reordering near-ties.
pub fn select_best<S: SequenceScorer + ?Sized>(
    scorer: &S,
    partial: &[&Example],
    candidates: &[&Example],
    anchor: &Example,
) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::Precondition("select_best needs at least one candidate".into()));
    }
    let mut best: Option<(Score, usize)> = None;
    let mut extended = partial.to_vec();
    extended.push(candidates[0]);
    for cand in candidates {
        check_not_in(partial, cand)?;
        *extended.last_mut().unwrap() = cand;
        let s = scorer.score(&extended, anchor);
        let better = match &best {
            None => true,
            Some((bs, bid)) => match s.total_cmp(bs) {
                Ordering::Greater => true,
                Ordering::Equal => cand.id < *bid,
                Ordering::Less => false,
            },
        };
        if better {
            best = Some((s, cand.id));
        }
    }
    Ok(best.unwrap().1)
}

/// Builds a `k`-long sequence by repeated [`select_best`].
pub fn greedy_chain<S: SequenceScorer + ?Sized>(
    scorer: &S,
    candidates: &[&Example],
    anchor: &Example,
    k: usize,
) -> Result<Vec<usize>> {
    let mut chosen: Vec<&Example> = Vec::with_capacity(k);
    for _ in 0..k {
        let remaining: Vec<&Example> = candidates
            .iter()
            .copied()
            .filter(|c| chosen.iter().all(|d| d.id != c.id))
            .collect();
        let id = select_best(scorer, &chosen, &remaining, anchor)?;
        chosen.push(remaining.iter().find(|c| c.id == id).unwrap());
    }
    Ok(chosen.iter().map(|e| e.id).collect())
}

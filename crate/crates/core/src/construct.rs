//! Construction of the training set: anchors, per-anchor sub-supporting sets,
//! and beam search over ordered demonstration sequences.

use std::cmp::Ordering;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::scorer::{OracleScorer, Score, ScorerKind, SequenceScorer};
use crate::types::{cosine, ConstructionRecord, Example, IcdSequence, QuerySample};
use crate::world::SynthWorld;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubSupportStrategy {
    Random,
    SimImage,
    SimText,
}

/// Where each newly selected demonstration enters the partial sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Insertion {
    /// After the current last demonstration.
    Append,
    /// Before the current first demonstration.
    Prepend,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstructionConfig {
    /// Number of anchors drawn from the training pool.
    pub anchors: usize,
    /// Sub-supporting set size per anchor.
    pub sub_support: usize,
    pub strategy: SubSupportStrategy,
    /// Sequence length.
    pub shots: usize,
    /// Beam width, also the number of sequences kept per anchor.
    pub beam: usize,
    pub scorer: ScorerKind,
    pub insertion: Insertion,
    pub seed: u64,
}

impl Default for ConstructionConfig {
    fn default() -> Self {
        Self {
            anchors: 256,
            sub_support: 32,
            strategy: SubSupportStrategy::Random,
            shots: 2,
            beam: 5,
            scorer: ScorerKind::Confidence,
            insertion: Insertion::Append,
            seed: 1,
        }
    }
}

/// Splits the pool into `n` anchors and the complementary supporting set.
///
/// Both halves keep their original ids and pool order; see [`reindex`].
pub fn split_anchor_set(
    pool: &[Example],
    n: usize,
    seed: u64,
) -> Result<(Vec<QuerySample>, Vec<Example>)> {
    if n >= pool.len() {
        return Err(Error::Config(format!(
            "anchor count {n} must be smaller than the pool size {}",
            pool.len()
        )));
    }
    let mut rng = rng::seeded(seed, stream::ANCHOR_SPLIT);
    let mut chosen = vec![false; pool.len()];
    for i in index::sample(&mut rng, pool.len(), n) {
        chosen[i] = true;
    }
    let (anchors, support): (Vec<_>, Vec<_>) = pool
        .iter()
        .cloned()
        .zip(&chosen)
        .partition(|(_, &c)| c);
    Ok((
        anchors.into_iter().map(|(e, _)| e).collect(),
        support.into_iter().map(|(e, _)| e).collect(),
    ))
}

/// Renumbers ids consecutively from 0 in the given order.
pub fn reindex(set: Vec<Example>) -> Vec<Example> {
    set.into_iter()
        .enumerate()
        .map(|(i, mut e)| {
            e.id = i;
            e
        })
        .collect()
}

/// Indices of the `m` entries with the highest similarity; ties go to the
/// lowest id.
fn top_m_by(
    support: &[Example],
    m: usize,
    sim: impl Fn(&Example) -> Result<f64>,
) -> Result<Vec<&Example>> {
    let mut scored = support
        .iter()
        .map(|e| Ok((sim(e)?, e)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.id.cmp(&b.1.id)));
    scored.truncate(m);
    Ok(scored.into_iter().map(|(_, e)| e).collect())
}

/// Draws the per-anchor candidate pool. The result is ordered by id.
pub fn sample_sub_support<'a>(
    anchor: &QuerySample,
    support: &'a [Example],
    strategy: SubSupportStrategy,
    m: usize,
    seed: u64,
) -> Result<Vec<&'a Example>> {
    if m > support.len() {
        return Err(Error::Config(format!(
            "sub-support size {m} exceeds supporting set size {}",
            support.len()
        )));
    }
    let mut picked = match strategy {
        SubSupportStrategy::Random => {
            let mut rng = rng::per_item(seed, anchor.id);
            index::sample(&mut rng, support.len(), m)
                .into_iter()
                .map(|i| &support[i])
                .collect()
        }
        SubSupportStrategy::SimImage => {
            top_m_by(support, m, |d| cosine(&anchor.img_feat, &d.img_feat))?
        }
        SubSupportStrategy::SimText => {
            let query = anchor.txt_feat.as_deref().ok_or_else(|| {
                Error::Capability(format!("anchor {} has no text features", anchor.id))
            })?;
            top_m_by(support, m, |d| {
                let txt = d.txt_feat.as_deref().ok_or_else(|| {
                    Error::Capability(format!("example {} has no text features", d.id))
                })?;
                cosine(query, txt)
            })?
        }
    };
    picked.sort_by_key(|e| e.id);
    Ok(picked)
}

fn ordered_sequences(m: usize, k: usize) -> usize {
    (0..k).fold(1usize, |acc, i| acc.saturating_mul(m.saturating_sub(i)))
}

/// Beam search over ordered, repeat-free sequences of length `k`.
///
/// Every extension is scored from scratch. Candidates are ranked by score,
/// then by the lexicographically smallest id tuple. With `beam = 1` this is
/// the greedy chain of [`crate::scorer::select_best`].
pub fn beam_build<S: SequenceScorer + ?Sized>(
    scorer: &S,
    anchor: &QuerySample,
    sub_support: &[&Example],
    k: usize,
    beam: usize,
) -> Result<ConstructionRecord> {
    beam_build_with(scorer, anchor, sub_support, k, beam, Insertion::Append)
}

/// [`beam_build`] with a choice of where each selected demonstration is
/// inserted.
pub fn beam_build_with<S: SequenceScorer + ?Sized>(
    scorer: &S,
    anchor: &QuerySample,
    sub_support: &[&Example],
    k: usize,
    beam: usize,
    insertion: Insertion,
) -> Result<ConstructionRecord> {
    if k == 0 || beam == 0 {
        return Err(Error::Config("shots and beam width must be at least 1".into()));
    }
    if k > sub_support.len() {
        return Err(Error::Config(format!(
            "sequence length {k} exceeds sub-support size {}",
            sub_support.len()
        )));
    }
    if beam > ordered_sequences(sub_support.len(), k) {
        return Err(Error::Config(format!(
            "beam width {beam} exceeds the {} distinct sequences available",
            ordered_sequences(sub_support.len(), k)
        )));
    }

    let mut beams: Vec<(Vec<usize>, Score)> = vec![(Vec::new(), Score::single(0.0))];
    let mut seq: Vec<&Example> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut expanded: Vec<(Vec<usize>, Score)> = Vec::new();
        for (prefix, _) in &beams {
            for j in 0..sub_support.len() {
                if prefix.contains(&j) {
                    continue;
                }
                let mut next = prefix.clone();
                match insertion {
                    Insertion::Append => next.push(j),
                    Insertion::Prepend => next.insert(0, j),
                }
                seq.clear();
                seq.extend(next.iter().map(|&i| sub_support[i]));
                let score = scorer.score(&seq, anchor);
                expanded.push((next, score));
            }
        }
        let ids = |idx: &[usize]| idx.iter().map(|&i| sub_support[i].id).collect::<Vec<_>>();
        expanded.sort_by(|a, b| match b.1.total_cmp(&a.1) {
            Ordering::Equal => ids(&a.0).cmp(&ids(&b.0)),
            other => other,
        });
        expanded.truncate(beam);
        beams = expanded;
    }

    Ok(ConstructionRecord {
        anchor_id: anchor.id,
        sequences: beams
            .into_iter()
            .map(|(idx, s)| IcdSequence::new(idx.iter().map(|&i| sub_support[i].id).collect(), s.primary))
            .collect(),
    })
}

/// One record per anchor, in anchor order.
///
/// Anchors are processed in parallel on the current rayon pool; each anchor's
/// randomness comes from its own (seed, anchor id) stream, so the output does
/// not depend on scheduling.
pub fn build_dataset(
    world: &SynthWorld,
    anchors: &[QuerySample],
    support: &[Example],
    config: &ConstructionConfig,
) -> Result<Vec<ConstructionRecord>> {
    let scorer = OracleScorer::new(world, config.scorer);
    anchors
        .par_iter()
        .map(|anchor| {
            let sub = sample_sub_support(anchor, support, config.strategy, config.sub_support, config.seed)?;
            beam_build_with(&scorer, anchor, &sub, config.shots, config.beam, config.insertion)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorer::{confidence, greedy_chain};
    use crate::world::{sample_examples, world_generate, WorldParams};

    fn world() -> SynthWorld {
        world_generate(WorldParams::default()).unwrap()
    }

    #[test]
    fn split_boundary_and_errors() {
        let w = world();
        let pool = sample_examples(&w, 10, 1);
        let (a, s) = split_anchor_set(&pool, 9, 3).unwrap();
        assert_eq!((a.len(), s.len()), (9, 1));
        assert!(matches!(split_anchor_set(&pool, 10, 3), Err(Error::Config(_))));
    }

    #[test]
    fn split_is_a_partition() {
        let w = world();
        let pool = sample_examples(&w, 200, 1);
        for seed in 0..20 {
            let n = 1 + (seed as usize * 7) % 199;
            let (a, s) = split_anchor_set(&pool, n, seed).unwrap();
            assert_eq!(a.len(), n);
            assert_eq!(a.len() + s.len(), pool.len());
            let mut ids: Vec<usize> = a.iter().chain(&s).map(|e| e.id).collect();
            ids.sort();
            assert_eq!(ids, (0..200).collect::<Vec<_>>());
            assert!(a.iter().all(|x| s.iter().all(|y| x.id != y.id)));
        }
    }

    #[test]
    fn large_anchor_count_accepted() {
        let w = world_generate(WorldParams {
            feature_dim: 2,
            ..WorldParams::default()
        })
        .unwrap();
        let pool = sample_examples(&w, 6000, 1);
        let (a, s) = split_anchor_set(&pool, 5000, 1).unwrap();
        assert_eq!((a.len(), s.len()), (5000, 1000));
    }

    #[test]
    fn full_sub_support_is_whole_set() {
        let w = world();
        let pool = sample_examples(&w, 21, 2);
        let anchor = &pool[20];
        let support = &pool[..20];
        for strategy in [SubSupportStrategy::Random, SubSupportStrategy::SimImage, SubSupportStrategy::SimText] {
            let sub = sample_sub_support(anchor, support, strategy, 20, 0).unwrap();
            assert_eq!(sub.iter().map(|e| e.id).collect::<Vec<_>>(), (0..20).collect::<Vec<_>>());
        }
        assert!(sample_sub_support(anchor, support, SubSupportStrategy::Random, 21, 0).is_err());
    }

    #[test]
    fn sim_image_includes_identical_example() {
        let w = world();
        let pool = sample_examples(&w, 50, 3);
        let mut anchor = pool[17].clone();
        anchor.id = 1000;
        let sub = sample_sub_support(&anchor, &pool, SubSupportStrategy::SimImage, 1, 0).unwrap();
        assert_eq!(sub[0].id, 17);
    }

    #[test]
    fn sim_image_matches_full_sort() {
        let w = world();
        let pool = sample_examples(&w, 201, 4);
        let anchor = &pool[200];
        let support = &pool[..200];
        let sub = sample_sub_support(anchor, support, SubSupportStrategy::SimImage, 32, 0).unwrap();
        let mut all: Vec<(f64, usize)> = support
            .iter()
            .map(|d| {
                let dot: f64 = anchor.img_feat.iter().zip(&d.img_feat).map(|(a, b)| a * b).sum();
                let na: f64 = anchor.img_feat.iter().map(|a| a * a).sum::<f64>().sqrt();
                let nd: f64 = d.img_feat.iter().map(|a| a * a).sum::<f64>().sqrt();
                (dot / (na * nd), d.id)
            })
            .collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let mut want: Vec<usize> = all[..32].iter().map(|x| x.1).collect();
        want.sort();
        assert_eq!(sub.iter().map(|e| e.id).collect::<Vec<_>>(), want);
    }

    #[test]
    fn sim_text_requires_text_features() {
        let w = world();
        let mut pool = sample_examples(&w, 5, 3);
        pool[2].txt_feat = None;
        let anchor = pool[0].clone();
        assert!(matches!(
            sample_sub_support(&anchor, &pool[1..], SubSupportStrategy::SimText, 2, 0),
            Err(Error::Capability(_))
        ));
        let mut bare = anchor.clone();
        bare.txt_feat = None;
        assert!(matches!(
            sample_sub_support(&bare, &pool[3..], SubSupportStrategy::SimText, 1, 0),
            Err(Error::Capability(_))
        ));
    }

    #[test]
    fn random_sub_support_is_seeded() {
        let w = world();
        let pool = sample_examples(&w, 101, 5);
        let a1 = sample_sub_support(&pool[100], &pool[..100], SubSupportStrategy::Random, 10, 9).unwrap();
        let a2 = sample_sub_support(&pool[100], &pool[..100], SubSupportStrategy::Random, 10, 9).unwrap();
        assert_eq!(a1, a2);
        let mut ids: Vec<usize> = a1.iter().map(|e| e.id).collect();
        ids.dedup();
        assert_eq!(ids.len(), 10);
    }

    #[test]
    fn beam_of_one_is_greedy() {
        let w = world();
        let pool = sample_examples(&w, 400, 6);
        let scorer = OracleScorer::new(&w, ScorerKind::Confidence);
        for inst in 0..20 {
            let anchor = &pool[inst * 20];
            let sub: Vec<&Example> = pool[inst * 20 + 1..inst * 20 + 13].iter().collect();
            let rec = beam_build(&scorer, anchor, &sub, 3, 1).unwrap();
            assert_eq!(rec.sequences.len(), 1);
            assert_eq!(rec.sequences[0].icds, greedy_chain(&scorer, &sub, anchor, 3).unwrap());
        }
    }

    #[test]
    fn wide_beam_matches_exhaustive_pairs() {
        let w = world();
        let pool = sample_examples(&w, 140, 7);
        let scorer = OracleScorer::new(&w, ScorerKind::Confidence);
        for inst in 0..20 {
            let anchor = &pool[inst * 7];
            let sub: Vec<&Example> = pool[inst * 7 + 1..inst * 7 + 7].iter().collect();
            let rec = beam_build(&scorer, anchor, &sub, 2, 30).unwrap();
            let mut best: Option<(f64, Vec<usize>)> = None;
            for a in &sub {
                for b in &sub {
                    if a.id == b.id {
                        continue;
                    }
                    let v = confidence(&w, &[a, b], anchor);
                    if best.as_ref().is_none_or(|(bv, _)| v > *bv) {
                        best = Some((v, vec![a.id, b.id]));
                    }
                }
            }
            assert_eq!(rec.sequences.len(), 30);
            assert_eq!(rec.sequences[0].icds, best.unwrap().1);
        }
    }

    #[test]
    fn beam_output_shape_and_invariants() {
        let w = world();
        let pool = sample_examples(&w, 70, 8);
        let scorer = OracleScorer::new(&w, ScorerKind::Confidence);
        let sub: Vec<&Example> = pool[1..65].iter().collect();
        let rec = beam_build(&scorer, &pool[0], &sub, 2, 5).unwrap();
        assert_eq!(rec.sequences.len(), 5);
        rec.validate(70).unwrap();
        for s in &rec.sequences {
            let seq: Vec<&Example> = s.icds.iter().map(|&id| &pool[id]).collect();
            assert!((confidence(&w, &seq, &pool[0]) - s.score).abs() < 1e-10);
        }
    }

    #[test]
    fn beam_errors() {
        let w = world();
        let pool = sample_examples(&w, 5, 8);
        let scorer = OracleScorer::new(&w, ScorerKind::Confidence);
        let sub: Vec<&Example> = pool[1..4].iter().collect();
        assert!(matches!(beam_build(&scorer, &pool[0], &sub, 4, 1), Err(Error::Config(_))));
        assert!(matches!(beam_build(&scorer, &pool[0], &sub, 0, 1), Err(Error::Config(_))));
        assert!(matches!(beam_build(&scorer, &pool[0], &sub, 2, 7), Err(Error::Config(_))));
        assert!(beam_build(&scorer, &pool[0], &sub, 2, 6).is_ok());
    }

    #[test]
    fn wider_beam_never_worse() {
        let w = world();
        let pool = sample_examples(&w, 600, 9);
        let scorer = OracleScorer::new(&w, ScorerKind::Confidence);
        for inst in 0..30 {
            let anchor = &pool[inst * 20];
            let sub: Vec<&Example> = pool[inst * 20 + 1..inst * 20 + 17].iter().collect();
            for k in [2, 3] {
                let mut prev = f64::NEG_INFINITY;
                for b in [1, 2, 5, 10] {
                    let best = beam_build(&scorer, anchor, &sub, k, b).unwrap().sequences[0].score;
                    assert!(best >= prev, "k={k} b={b}: {best} < {prev}");
                    prev = best;
                }
            }
        }
    }

    #[test]
    fn single_anchor_dataset() {
        let w = world();
        let pool = sample_examples(&w, 40, 10);
        let cfg = ConstructionConfig {
            anchors: 1,
            sub_support: 8,
            ..ConstructionConfig::default()
        };
        let recs = build_dataset(&w, &pool[..1], &pool[1..], &cfg).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].anchor_id, 0);
    }

    #[test]
    fn dataset_is_thread_count_invariant() {
        let w = world();
        let pool = sample_examples(&w, 120, 11);
        let cfg = ConstructionConfig {
            anchors: 20,
            sub_support: 16,
            ..ConstructionConfig::default()
        };
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| build_dataset(&w, &pool[..20], &pool[20..], &cfg).unwrap())
        };
        let serial = run(1);
        let parallel = run(4);
        assert_eq!(serde_json::to_string(&serial).unwrap(), serde_json::to_string(&parallel).unwrap());
        for rec in &serial {
            rec.validate(120).unwrap();
        }
    }

    #[test]
    fn prepend_with_full_beam_is_exhaustive() {
        let w = world();
        let set = sample_examples(&w, 7, 12);
        let sub: Vec<&Example> = set[..6].iter().collect();
        let scorer = OracleScorer::new(&w, ScorerKind::Confidence);
        let a = beam_build_with(&scorer, &set[6], &sub, 2, 30, Insertion::Append).unwrap();
        let p = beam_build_with(&scorer, &set[6], &sub, 2, 30, Insertion::Prepend).unwrap();
        assert_eq!(a, p);
    }

    #[test]
    fn prepend_of_one_builds_back_to_front() {
        let w = world();
        let set = sample_examples(&w, 9, 13);
        let sub: Vec<&Example> = set[..8].iter().collect();
        let anchor = &set[8];
        let scorer = OracleScorer::new(&w, ScorerKind::Confidence);
        let got = beam_build_with(&scorer, anchor, &sub, 3, 1, Insertion::Prepend).unwrap();
        let mut chosen: Vec<&Example> = Vec::new();
        for _ in 0..3 {
            let mut best: Option<(f64, &Example)> = None;
            for &c in &sub {
                if chosen.iter().any(|d| d.id == c.id) {
                    continue;
                }
                let mut seq = vec![c];
                seq.extend(chosen.iter().copied());
                let v = confidence(&w, &seq, anchor);
                if best.is_none_or(|(bv, _)| v > bv) {
                    best = Some((v, c));
                }
            }
            chosen.insert(0, best.unwrap().1);
        }
        let ids: Vec<usize> = chosen.iter().map(|e| e.id).collect();
        assert_eq!(got.sequences[0].icds, ids);
    }
}

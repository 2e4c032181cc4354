//! Decoding demonstration sequences from a trained model.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, LeverLmParams, SeqInput, TaskMode};
use crate::types::{Example, IcdSequence, QuerySample};
use crate::world::log_sum_exp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Beam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub beam_width: usize,
    pub no_repeat: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Greedy,
            beam_width: 3,
            no_repeat: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoldenMethod {
    /// Decode once from an all-zero query.
    NullQuery,
    /// The most frequent sequence decoded over the anchor set.
    ModeOverAnchors,
}

/// Log-probabilities over supporting-set ids for the next position, with
/// special tokens and (optionally) already-chosen ids masked to `-inf`.
fn next_log_probs(
    logits_row: ndarray::ArrayView1<'_, f64>,
    n: usize,
    chosen: &[usize],
    no_repeat: bool,
) -> Vec<f64> {
    let mut masked: Vec<f64> = logits_row.iter().take(n).copied().collect();
    if no_repeat {
        for &c in chosen {
            masked[c] = f64::NEG_INFINITY;
        }
    }
    let z = log_sum_exp(&masked);
    masked.iter().map(|&l| l - z).collect()
}

fn check_request(params: &LeverLmParams, shots: usize, config: &DecodeConfig) -> Result<()> {
    let n = params.support_size;
    if shots == 0 {
        return Err(Error::Config("shots must be positive".into()));
    }
    if config.no_repeat && shots > n {
        return Err(Error::Config(format!(
            "cannot draw {shots} distinct demonstrations from {n} examples"
        )));
    }
    if shots + 2 > params.config.max_len() {
        return Err(Error::Length {
            len: shots + 2,
            max: params.config.max_len(),
        });
    }
    if config.mode == DecodeMode::Beam && config.beam_width == 0 {
        return Err(Error::Config("beam_width must be positive".into()));
    }
    Ok(())
}

/// Decodes `shots` demonstrations for `query`. The returned score is the
/// summed masked log-probability of the chosen ids.
pub fn generate(
    params: &LeverLmParams,
    support: &[Example],
    query: &QuerySample,
    shots: usize,
    config: &DecodeConfig,
    mode: TaskMode,
) -> Result<IcdSequence> {
    check_request(params, shots, config)?;
    match config.mode {
        DecodeMode::Greedy => greedy(params, support, query, shots, config.no_repeat, mode),
        DecodeMode::Beam => beam(params, support, query, shots, config, mode),
    }
}

fn greedy(
    params: &LeverLmParams,
    support: &[Example],
    query: &QuerySample,
    shots: usize,
    no_repeat: bool,
    mode: TaskMode,
) -> Result<IcdSequence> {
    let vocab = params.vocab();
    let mut chosen = Vec::with_capacity(shots);
    let mut score = 0.0;
    for _ in 0..shots {
        let row = model::input_row(vocab, &chosen);
        let logits = model::forward_row(params, support, &row, query, mode)?;
        let lp = next_log_probs(logits.row(row.len() - 1), vocab.n, &chosen, no_repeat);
        let best = crate::world::argmax(&lp);
        score += lp[best];
        chosen.push(best);
    }
    Ok(IcdSequence::new(chosen, score))
}

fn beam(
    params: &LeverLmParams,
    support: &[Example],
    query: &QuerySample,
    shots: usize,
    config: &DecodeConfig,
    mode: TaskMode,
) -> Result<IcdSequence> {
    let vocab = params.vocab();
    let mut beams: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    for _ in 0..shots {
        let rows: Vec<Vec<usize>> = beams.iter().map(|(s, _)| model::input_row(vocab, s)).collect();
        let inputs: Vec<SeqInput> = rows.iter().map(|r| SeqInput { tokens: r, query }).collect();
        let logits = model::forward(params, support, &inputs, mode)?;
        let len = rows[0].len();
        let mut cands: Vec<(Vec<usize>, f64)> = Vec::new();
        for (b, (seq, score)) in beams.iter().enumerate() {
            let lp = next_log_probs(logits.row(b * len + len - 1), vocab.n, seq, config.no_repeat);
            for (id, &l) in lp.iter().enumerate() {
                if l == f64::NEG_INFINITY {
                    continue;
                }
                let mut next = seq.clone();
                next.push(id);
                cands.push((next, score + l));
            }
        }
        cands.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        cands.truncate(config.beam_width);
        beams = cands;
    }
    let (icds, score) = beams.swap_remove(0);
    Ok(IcdSequence::new(icds, score))
}

/// A single query-independent sequence.
pub fn golden_extract(
    params: &LeverLmParams,
    support: &[Example],
    anchors: &[QuerySample],
    shots: usize,
    method: GoldenMethod,
    config: &DecodeConfig,
    mode: TaskMode,
) -> Result<IcdSequence> {
    match method {
        GoldenMethod::NullQuery => {
            let f = params.feature_dim;
            let null = Example {
                id: usize::MAX,
                img_feat: vec![0.0; f],
                txt_feat: (mode == TaskMode::ImageText).then(|| vec![0.0; f]),
                label: Vec::new(),
                task: 0,
            };
            generate(params, support, &null, shots, config, mode)
        }
        GoldenMethod::ModeOverAnchors => {
            if anchors.is_empty() {
                return Err(Error::Precondition("mode over anchors needs at least one anchor".into()));
            }
            let decoded: Vec<IcdSequence> = anchors
                .par_iter()
                .map(|a| generate(params, support, a, shots, config, mode))
                .collect::<Result<_>>()?;
            let mut counts: BTreeMap<&[usize], (usize, f64)> = BTreeMap::new();
            for s in &decoded {
                let e = counts.entry(&s.icds).or_insert((0, 0.0));
                e.0 += 1;
                e.1 += s.score;
            }
            let mut best: Option<(&[usize], usize, f64)> = None;
            for (seq, &(count, total)) in &counts {
                if best.is_none_or(|(_, c, _)| count > c) {
                    best = Some((seq, count, total));
                }
            }
            let (seq, count, total) = best.expect("non-empty");
            Ok(IcdSequence::new(seq.to_vec(), total / count as f64))
        }
    }
}

/// The first `k` demonstrations of `seq`.
pub fn truncate_sequence(seq: &IcdSequence, k: usize) -> Result<IcdSequence> {
    if k > seq.len() {
        return Err(Error::Config(format!(
            "cannot truncate a {}-shot sequence to {k} shots",
            seq.len()
        )));
    }
    Ok(IcdSequence::new(seq.icds[..k].to_vec(), seq.score))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Arch, ModelConfig};
    use crate::world::{sample_examples, world_generate, WorldParams};

    fn setup(arch: Arch) -> (LeverLmParams, Vec<Example>, Vec<Example>) {
        let w = world_generate(WorldParams {
            feature_dim: 6,
            ..WorldParams::default()
        })
        .unwrap();
        let support = sample_examples(&w, 10, 1);
        let queries = sample_examples(&w, 8, 2);
        let cfg = ModelConfig {
            arch,
            d_model: 16,
            heads: 2,
            ffn_mult: 2,
            ..ModelConfig::default()
        };
        let mut p = LeverLmParams::init(cfg, 10, 6, 7).unwrap();
        // Larger head weights make the distributions peaked enough to matter.
        p.tensors.get_mut("head").unwrap().mapv_inplace(|x| x * 50.0);
        (p, support, queries)
    }

    fn exhaustive(p: &LeverLmParams, s: &[Example], q: &Example, k: usize) -> (Vec<usize>, f64) {
        let n = s.len();
        let mut best = (Vec::new(), f64::NEG_INFINITY);
        let mut stack = vec![(Vec::<usize>::new(), 0.0)];
        while let Some((seq, sc)) = stack.pop() {
            if seq.len() == k {
                if sc > best.1 || (sc == best.1 && seq < best.0) {
                    best = (seq, sc);
                }
                continue;
            }
            let row = model::input_row(p.vocab(), &seq);
            let logits = model::forward_row(p, s, &row, q, TaskMode::Image).unwrap();
            let lp = next_log_probs(logits.row(row.len() - 1), n, &seq, true);
            for (id, &l) in lp.iter().enumerate() {
                if l.is_finite() {
                    let mut nx = seq.clone();
                    nx.push(id);
                    stack.push((nx, sc + l));
                }
            }
        }
        best
    }

    #[test]
    fn outputs_are_distinct_valid_ids() {
        for arch in [Arch::Transformer, Arch::Lstm] {
            let (p, s, qs) = setup(arch);
            for q in &qs {
                for cfg in [DecodeConfig::default(), DecodeConfig { mode: DecodeMode::Beam, ..DecodeConfig::default() }] {
                    let seq = generate(&p, &s, q, 8, &cfg, TaskMode::Image).unwrap();
                    assert_eq!(seq.len(), 8);
                    assert!(!seq.has_duplicates());
                    assert!(seq.icds.iter().all(|&i| i < 10));
                }
            }
        }
    }

    #[test]
    fn width_one_beam_equals_greedy() {
        let (p, s, qs) = setup(Arch::Transformer);
        let b1 = DecodeConfig {
            mode: DecodeMode::Beam,
            beam_width: 1,
            no_repeat: true,
        };
        for q in &qs {
            let g = generate(&p, &s, q, 4, &DecodeConfig::default(), TaskMode::Image).unwrap();
            let b = generate(&p, &s, q, 4, &b1, TaskMode::Image).unwrap();
            assert_eq!(g.icds, b.icds);
            assert!((g.score - b.score).abs() < 1e-12);
        }
    }

    #[test]
    fn wide_beam_matches_exhaustive() {
        let (p, s, qs) = setup(Arch::Transformer);
        let wide = DecodeConfig {
            mode: DecodeMode::Beam,
            beam_width: 90,
            no_repeat: true,
        };
        for q in &qs {
            let b = generate(&p, &s, q, 2, &wide, TaskMode::Image).unwrap();
            let (seq, score) = exhaustive(&p, &s, q, 2);
            assert_eq!(b.icds, seq);
            assert!((b.score - score).abs() < 1e-9);
        }
    }

    #[test]
    fn beam_never_worse_than_greedy() {
        let (p, s, qs) = setup(Arch::Lstm);
        let beam3 = DecodeConfig {
            mode: DecodeMode::Beam,
            ..DecodeConfig::default()
        };
        for q in &qs {
            let g = generate(&p, &s, q, 2, &DecodeConfig::default(), TaskMode::Image).unwrap();
            let b = generate(&p, &s, q, 2, &beam3, TaskMode::Image).unwrap();
            assert!(b.score >= g.score - 1e-12);
        }
    }

    #[test]
    fn score_is_sum_of_step_log_probs() {
        let (p, s, qs) = setup(Arch::Transformer);
        let q = &qs[0];
        let seq = generate(&p, &s, q, 3, &DecodeConfig::default(), TaskMode::Image).unwrap();
        let mut total = 0.0;
        for j in 0..3 {
            let row = model::input_row(p.vocab(), &seq.icds[..j]);
            let logits = model::forward_row(&p, &s, &row, q, TaskMode::Image).unwrap();
            let last = logits.row(row.len() - 1);
            let allowed: Vec<f64> = (0..10).filter(|i| !seq.icds[..j].contains(i)).map(|i| last[i]).collect();
            total += last[seq.icds[j]] - log_sum_exp(&allowed);
        }
        assert!((seq.score - total).abs() < 1e-10);
    }

    #[test]
    fn rejects_impossible_requests() {
        let (p, s, qs) = setup(Arch::Transformer);
        let cfg = DecodeConfig::default();
        assert!(matches!(generate(&p, &s, &qs[0], 11, &cfg, TaskMode::Image), Err(Error::Config(_))));
        let small = LeverLmParams::init(p.config.clone(), 4, 6, 1).unwrap();
        assert!(matches!(
            generate(&small, &s[..4], &qs[0], 5, &cfg, TaskMode::Image),
            Err(Error::Config(_))
        ));
        let big = LeverLmParams::init(p.config.clone(), 20, 6, 1).unwrap();
        let mut support20 = s.clone();
        support20.extend(s.iter().map(|e| Example { id: e.id + 10, ..e.clone() }));
        assert!(matches!(
            generate(&big, &support20, &qs[0], 10, &cfg, TaskMode::Image),
            Err(Error::Length { .. })
        ));
    }

    #[test]
    fn golden_mode_and_null_query() {
        let (p, s, qs) = setup(Arch::Transformer);
        let cfg = DecodeConfig::default();
        let g = golden_extract(&p, &s, &qs, 3, GoldenMethod::ModeOverAnchors, &cfg, TaskMode::Image).unwrap();
        let decoded: Vec<Vec<usize>> = qs
            .iter()
            .map(|q| generate(&p, &s, q, 3, &cfg, TaskMode::Image).unwrap().icds)
            .collect();
        let count = |x: &Vec<usize>| decoded.iter().filter(|d| *d == x).count();
        let best = count(&g.icds);
        for d in &decoded {
            assert!(count(d) < best || (count(d) == best && g.icds <= *d));
        }
        let null = golden_extract(&p, &s, &qs, 3, GoldenMethod::NullQuery, &cfg, TaskMode::Image).unwrap();
        assert_eq!(null.len(), 3);
        let again = golden_extract(&p, &s, &qs, 3, GoldenMethod::NullQuery, &cfg, TaskMode::Image).unwrap();
        assert_eq!(null, again);
    }

    #[test]
    fn truncation() {
        let seq = IcdSequence::new(vec![4, 1, 7, 2], -1.5);
        assert_eq!(truncate_sequence(&seq, 2).unwrap().icds, vec![4, 1]);
        assert_eq!(truncate_sequence(&seq, 4).unwrap().icds, seq.icds);
        assert!(truncate_sequence(&seq, 5).is_err());
    }
}

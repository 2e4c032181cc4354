//! Evaluation against the oracle, shot-range aggregates, the order ablation,
//! and report rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{self, BaselineKind};
use crate::error::{Error, Result};
use crate::generate::{self, DecodeConfig};
use crate::io::{self, FORMAT_VERSION};
use crate::model::{LeverLmParams, TaskMode};
use crate::rng;
use crate::scorer::confidence;
use crate::types::{Example, IcdSequence, QuerySample};
use crate::world::{Demo, SynthWorld};

/// Anything that picks demonstration ids (positions in the supporting set)
/// for a query.
pub trait IcdMethod: Sync {
    fn name(&self) -> String;
    fn select(&self, query: &QuerySample, shots: usize) -> Result<Vec<usize>>;
}

pub struct LeverLmMethod<'a> {
    pub params: &'a LeverLmParams,
    pub support: &'a [Example],
    pub decode: DecodeConfig,
    pub mode: TaskMode,
}

impl IcdMethod for LeverLmMethod<'_> {
    fn name(&self) -> String {
        "Lever-LM".into()
    }

    fn select(&self, query: &QuerySample, shots: usize) -> Result<Vec<usize>> {
        Ok(generate::generate(self.params, self.support, query, shots, &self.decode, self.mode)?.icds)
    }
}

pub struct BaselineMethod<'a> {
    pub kind: BaselineKind,
    pub support: &'a [Example],
    pub seed: u64,
}

impl IcdMethod for BaselineMethod<'_> {
    fn name(&self) -> String {
        self.kind.name().into()
    }

    fn select(&self, query: &QuerySample, shots: usize) -> Result<Vec<usize>> {
        Ok(baselines::retrieve(self.kind, query, self.support, shots, self.seed)?.icds)
    }
}

/// Precomputed sequences: either one per (query id, shot) or one per shot
/// shared by every query.
pub struct FixedMethod {
    pub name: String,
    pub per_query: BTreeMap<(usize, usize), Vec<usize>>,
    pub shared: BTreeMap<usize, Vec<usize>>,
}

impl FixedMethod {
    pub fn shared(name: impl Into<String>, per_shot: BTreeMap<usize, Vec<usize>>) -> Self {
        Self {
            name: name.into(),
            per_query: BTreeMap::new(),
            shared: per_shot,
        }
    }

    pub fn per_query(name: impl Into<String>, per_query: BTreeMap<(usize, usize), Vec<usize>>) -> Self {
        Self {
            name: name.into(),
            per_query,
            shared: BTreeMap::new(),
        }
    }
}

impl IcdMethod for FixedMethod {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn select(&self, query: &QuerySample, shots: usize) -> Result<Vec<usize>> {
        self.per_query
            .get(&(query.id, shots))
            .or_else(|| self.shared.get(&shots))
            .cloned()
            .ok_or_else(|| Error::Schema(format!("no {shots}-shot sequence for {}", self.name)))
    }
}

/// Means over the first two shots, the remaining shots, and all shots.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub interp: f64,
    pub extrap: Option<f64>,
    pub all: f64,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn aggregate(per_shot: &BTreeMap<usize, f64>, shots: &[usize]) -> Result<Aggregates> {
    if shots.is_empty() {
        return Err(Error::Config("shot list is empty".into()));
    }
    let values = shots
        .iter()
        .map(|s| {
            per_shot
                .get(s)
                .copied()
                .ok_or_else(|| Error::Schema(format!("no value for {s} shots")))
        })
        .collect::<Result<Vec<f64>>>()?;
    let split = values.len().min(2);
    Ok(Aggregates {
        interp: mean(&values[..split]),
        extrap: (values.len() > split).then(|| mean(&values[split..])),
        all: mean(&values),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub shots: Vec<usize>,
    pub accuracy: Vec<f64>,
    pub log_confidence: Vec<f64>,
    pub accuracy_avg: Aggregates,
    pub log_confidence_avg: Aggregates,
    pub queries: usize,
    pub seeds: Vec<u64>,
    pub config_digest: String,
}

impl EvalReport {
    pub fn accuracy_at(&self, shots: usize) -> Option<f64> {
        self.shots.iter().position(|&s| s == shots).map(|i| self.accuracy[i])
    }

    /// Checks that the aggregates follow from the per-shot values.
    pub fn check_aggregates(&self) -> Result<()> {
        for (values, stored, what) in [
            (&self.accuracy, &self.accuracy_avg, "accuracy"),
            (&self.log_confidence, &self.log_confidence_avg, "log-confidence"),
        ] {
            if values.len() != self.shots.len() {
                return Err(Error::Schema(format!("{what} has {} entries for {} shots", values.len(), self.shots.len())));
            }
            let map = self.shots.iter().copied().zip(values.iter().copied()).collect();
            let fresh = aggregate(&map, &self.shots)?;
            let close = |a: f64, b: f64| (a - b).abs() <= 1e-9;
            let extrap_ok = match (fresh.extrap, stored.extrap) {
                (Some(a), Some(b)) => close(a, b),
                (None, None) => true,
                _ => false,
            };
            if !(close(fresh.interp, stored.interp) && close(fresh.all, stored.all) && extrap_ok) {
                return Err(Error::Schema(format!("{what} aggregates of {} do not match", self.method)));
            }
        }
        Ok(())
    }
}

/// Accuracy and log-confidence of one demonstration sequence for a query.
pub fn score_sequence(world: &SynthWorld, support: &[Example], icds: &[usize], query: &QuerySample) -> Result<(f64, f64)> {
    let seq = icds
        .iter()
        .map(|&i| {
            support.get(i).ok_or(Error::Index {
                what: "supporting set",
                index: i,
                len: support.len(),
            })
        })
        .collect::<Result<Vec<&Example>>>()?;
    let demos: Vec<Demo> = seq.iter().map(|e| Demo::from_example(e)).collect();
    let acc = f64::from(world.oracle_accuracy(&demos, query));
    Ok((acc, confidence(world, &seq, query)))
}

/// Per-query evaluation at every shot count, averaged over queries.
pub fn evaluate_method(
    world: &SynthWorld,
    method: &dyn IcdMethod,
    support: &[Example],
    queries: &[QuerySample],
    shots: &[usize],
    seeds: &[u64],
    config_digest: &str,
) -> Result<EvalReport> {
    if shots.is_empty() {
        return Err(Error::Config("shot list is empty".into()));
    }
    if queries.is_empty() {
        return Err(Error::Precondition("no test queries".into()));
    }
    let per_query: Vec<Vec<(f64, f64)>> = queries
        .par_iter()
        .map(|q| {
            shots
                .iter()
                .map(|&s| {
                    let icds = method.select(q, s)?;
                    if icds.len() != s {
                        return Err(Error::Schema(format!(
                            "{} returned {} demonstrations for {s} shots",
                            method.name(),
                            icds.len()
                        )));
                    }
                    score_sequence(world, support, &icds, q)
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| Error::AtQuery {
                    query: q.id,
                    source: Box::new(e),
                })
        })
        .collect::<Result<_>>()?;
    let n = queries.len() as f64;
    let mut accuracy = vec![0.0; shots.len()];
    let mut log_confidence = vec![0.0; shots.len()];
    for row in &per_query {
        for (j, &(a, c)) in row.iter().enumerate() {
            accuracy[j] += a;
            log_confidence[j] += c;
        }
    }
    accuracy.iter_mut().for_each(|x| *x /= n);
    log_confidence.iter_mut().for_each(|x| *x /= n);
    let as_map = |v: &[f64]| shots.iter().copied().zip(v.iter().copied()).collect();
    Ok(EvalReport {
        method: method.name(),
        shots: shots.to_vec(),
        accuracy_avg: aggregate(&as_map(&accuracy), shots)?,
        log_confidence_avg: aggregate(&as_map(&log_confidence), shots)?,
        accuracy,
        log_confidence,
        queries: queries.len(),
        seeds: seeds.to_vec(),
        config_digest: config_digest.to_string(),
    })
}

/// Uniform random permutation of `0..len` for one query.
pub fn query_permutation(len: usize, seed: u64, query: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..len).collect();
    perm.shuffle(&mut rng::per_item(seed, query));
    perm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderAblation {
    pub shots: usize,
    pub original_accuracy: f64,
    pub permuted_accuracy: f64,
    /// Original minus permuted.
    pub delta_accuracy: f64,
    pub original_log_confidence: f64,
    pub permuted_log_confidence: f64,
    pub evaluated: usize,
    pub skipped: usize,
    pub seed: u64,
}

/// Compares each query's generated order with a random reordering of the
/// same demonstrations. Sequences shorter than two are skipped.
pub fn random_order_ablation(
    world: &SynthWorld,
    support: &[Example],
    queries: &[QuerySample],
    generated: &BTreeMap<usize, IcdSequence>,
    seed: u64,
) -> Result<OrderAblation> {
    let rows: Vec<Option<[(f64, f64); 2]>> = queries
        .par_iter()
        .map(|q| {
            let seq = generated
                .get(&q.id)
                .ok_or_else(|| Error::Schema(format!("no generated sequence for query {}", q.id)))?;
            if seq.len() < 2 {
                return Ok(None);
            }
            let perm = query_permutation(seq.len(), seed, q.id);
            let shuffled: Vec<usize> = perm.iter().map(|&i| seq.icds[i]).collect();
            Ok(Some([
                score_sequence(world, support, &seq.icds, q)?,
                score_sequence(world, support, &shuffled, q)?,
            ]))
        })
        .collect::<Result<_>>()?;
    let kept: Vec<[(f64, f64); 2]> = rows.iter().flatten().copied().collect();
    let skipped = rows.len() - kept.len();
    let avg = |which: usize, conf: bool| {
        if kept.is_empty() {
            return 0.0;
        }
        let total: f64 = kept.iter().map(|r| if conf { r[which].1 } else { r[which].0 }).sum();
        total / kept.len() as f64
    };
    let original_accuracy = avg(0, false);
    let permuted_accuracy = avg(1, false);
    Ok(OrderAblation {
        shots: generated.values().next().map_or(0, IcdSequence::len),
        original_accuracy,
        permuted_accuracy,
        delta_accuracy: original_accuracy - permuted_accuracy,
        original_log_confidence: avg(0, true),
        permuted_log_confidence: avg(1, true),
        evaluated: kept.len(),
        skipped,
        seed,
    })
}

pub const REPORT_KIND: &str = "report";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub format_version: u32,
    pub kind: String,
    pub config_digest: String,
    pub world_digest: String,
    pub rows: Vec<EvalReport>,
    pub ablations: Vec<OrderAblation>,
}

impl ReportFile {
    pub fn new(config_digest: &str, world_digest: &str, rows: Vec<EvalReport>, ablations: Vec<OrderAblation>) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind: REPORT_KIND.into(),
            config_digest: config_digest.into(),
            world_digest: world_digest.into(),
            rows,
            ablations,
        }
    }

    pub fn row(&self, method: &str) -> Option<&EvalReport> {
        self.rows.iter().find(|r| r.method == method)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Structured,
    Markdown,
}

pub fn emit_report(report: &ReportFile, path: &Path, format: ReportFormat) -> Result<()> {
    for row in &report.rows {
        row.check_aggregates()?;
    }
    match format {
        ReportFormat::Structured => io::write_document(path, report),
        ReportFormat::Markdown => {
            std::fs::write(path, render_markdown(report)).map_err(|e| Error::io(path, e))
        }
    }
}

pub fn load_report(path: &Path) -> Result<ReportFile> {
    io::read_document(path, REPORT_KIND)
}

fn aggregate_labels(shots: &[usize]) -> [String; 3] {
    let split = shots.len().min(2);
    let extrap = if shots.len() > split {
        format!("Avg:{}~{}", shots[split], shots[shots.len() - 1])
    } else {
        "Avg:-".into()
    };
    [
        format!("Avg:{}~{}", shots[0], shots[split - 1]),
        extrap,
        format!("Avg:{}~{}", shots[0], shots[shots.len() - 1]),
    ]
}

fn table(out: &mut String, rows: &[EvalReport], values: impl Fn(&EvalReport) -> (&[f64], &Aggregates), fmt: impl Fn(f64) -> String) {
    let Some(first) = rows.first() else {
        out.push_str("(no rows)\n");
        return;
    };
    let shots = &first.shots;
    let mut header = String::from("| Method |");
    let mut rule = String::from("|---|");
    for s in shots {
        let _ = write!(header, " {s} |");
        rule.push_str("---:|");
    }
    for label in aggregate_labels(shots) {
        let _ = write!(header, " {label} |");
        rule.push_str("---:|");
    }
    let _ = writeln!(out, "{header}\n{rule}");
    for row in rows {
        let (v, agg) = values(row);
        let mut line = format!("| {} |", row.method);
        for &x in v {
            let _ = write!(line, " {} |", fmt(x));
        }
        let extrap = agg.extrap.map_or_else(|| "-".to_string(), &fmt);
        let _ = write!(line, " {} | {} | {} |", fmt(agg.interp), extrap, fmt(agg.all));
        let _ = writeln!(out, "{line}");
    }
}

/// Markdown rendering: one row per method, one column per shot count, then
/// the three aggregates.
pub fn render_markdown(report: &ReportFile) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Evaluation report\n");
    let _ = writeln!(out, "config `{}`  ", report.config_digest);
    let _ = writeln!(out, "world `{}`\n", report.world_digest);
    if let Some(first) = report.rows.first() {
        let _ = writeln!(out, "{} test queries, seeds {:?}\n", first.queries, first.seeds);
    }
    let _ = writeln!(out, "## Accuracy (%)\n");
    table(&mut out, &report.rows, |r| (&r.accuracy, &r.accuracy_avg), |x| format!("{:.2}", 100.0 * x));
    let _ = writeln!(out, "\n## Mean log-confidence\n");
    table(&mut out, &report.rows, |r| (&r.log_confidence, &r.log_confidence_avg), |x| format!("{x:.4}"));
    if !report.ablations.is_empty() {
        let _ = writeln!(out, "\n## Generated vs. random order\n");
        let _ = writeln!(out, "| Shots | Generated (%) | Random (%) | Delta | Evaluated | Skipped |");
        let _ = writeln!(out, "|---:|---:|---:|---:|---:|---:|");
        for a in &report.ablations {
            let _ = writeln!(
                out,
                "| {} | {:.2} | {:.2} | {:+.2} | {} | {} |",
                a.shots,
                100.0 * a.original_accuracy,
                100.0 * a.permuted_accuracy,
                100.0 * a.delta_accuracy,
                a.evaluated,
                a.skipped
            );
        }
    }
    out
}

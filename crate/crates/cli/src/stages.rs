//! Stage implementations. Each stage reads its inputs from the artifact
//! directory, checks their provenance, and writes its outputs next to them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use lever_core::config::RunConfig;
use lever_core::harness::{emit_report, load_report, ReportFile, ReportFormat};
use lever_core::io::{self, ExamplesHeader, RecordsHeader, FORMAT_VERSION, RECORDS_KIND};
use lever_core::model::{checkpoint_load, checkpoint_save, Arch, LeverLmParams, Sample};
use lever_core::pipeline::{self, Generations, Split};
use lever_core::train::{grad_check as check_gradients, LossPoint};
use lever_core::world::{sample_examples, SynthWorld};
use lever_core::{ConstructionRecord, Error, Example, IcdSequence};
use serde::{Deserialize, Serialize};

pub const WORLD_FILE: &str = "world.json";
pub const POOL_FILE: &str = "pool.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const ANCHORS_FILE: &str = "anchors.jsonl";
pub const SUPPORT_FILE: &str = "support.jsonl";
pub const DATASET_FILE: &str = "dataset.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const HISTORY_FILE: &str = "loss_history.jsonl";
pub const GENERATIONS_FILE: &str = "generations.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const MARKDOWN_FILE: &str = "report.md";

fn ensure_dir(out: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn load_world(out: &Path) -> anyhow::Result<(SynthWorld, String)> {
    let world = SynthWorld::load(&out.join(WORLD_FILE))?;
    let digest = world.digest();
    Ok((world, digest))
}

fn check_world(path: &Path, found: Option<&str>, expected: &str) -> lever_core::Result<()> {
    match found {
        Some(d) if d == expected => Ok(()),
        _ => Err(Error::Schema(format!(
            "{} was produced from a different world",
            path.display()
        ))),
    }
}

fn load_examples(out: &Path, name: &str, world_digest: &str) -> anyhow::Result<Vec<Example>> {
    let path = out.join(name);
    let (header, set): (ExamplesHeader, _) = io::deserialize_examples_with_header(&path)?;
    check_world(&path, header.world_digest.as_deref(), world_digest)?;
    Ok(set)
}

fn save_examples(out: &Path, name: &str, set: &[Example], world_digest: &str, config_digest: &str) -> anyhow::Result<()> {
    io::serialize_examples_with(
        set,
        &out.join(name),
        Some(world_digest.to_string()),
        Some(config_digest.to_string()),
    )?;
    Ok(())
}

pub fn world_gen(config: &RunConfig, out: &Path) -> anyhow::Result<()> {
    ensure_dir(out)?;
    let data = pipeline::make_world(config)?;
    let digest = config.digest();
    let wd = data.world.digest();
    let mut file = data.world.to_file();
    file.config_digest = Some(digest.clone());
    io::write_document(&out.join(WORLD_FILE), &file)?;
    save_examples(out, POOL_FILE, &data.pool, &wd, &digest)?;
    save_examples(out, TEST_FILE, &data.test, &wd, &digest)?;
    println!(
        "world {wd}: {} pool examples, {} test queries",
        data.pool.len(),
        data.test.len()
    );
    Ok(())
}

fn load_split(out: &Path, world_digest: &str) -> anyhow::Result<Split> {
    Ok(Split {
        anchors: load_examples(out, ANCHORS_FILE, world_digest)?,
        support: load_examples(out, SUPPORT_FILE, world_digest)?,
    })
}

pub fn dataset_build(config: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let (world, wd) = load_world(out)?;
    let pool = load_examples(out, POOL_FILE, &wd)?;
    let digest = config.digest();
    let split = pipeline::split(config, &pool)?;
    let records = pipeline::construct(config, &world, &split)?;
    save_examples(out, ANCHORS_FILE, &split.anchors, &wd, &digest)?;
    save_examples(out, SUPPORT_FILE, &split.support, &wd, &digest)?;
    let header = RecordsHeader {
        format_version: FORMAT_VERSION,
        kind: RECORDS_KIND.into(),
        config_digest: digest,
        world_digest: wd,
        anchors: records.len(),
        shots: config.construction.shots,
        beam: config.construction.beam,
    };
    io::write_records(&out.join(DATASET_FILE), &header, &records)?;
    println!(
        "{} anchors x {} sequences of length {}",
        records.len(),
        config.construction.beam,
        config.construction.shots
    );
    Ok(())
}

fn load_records(out: &Path, world_digest: &str) -> anyhow::Result<Vec<ConstructionRecord>> {
    let path = out.join(DATASET_FILE);
    let (header, records) = io::read_records(&path)?;
    check_world(&path, Some(&header.world_digest), world_digest)?;
    Ok(records)
}

#[derive(Debug, Serialize, Deserialize)]
struct HistoryHeader {
    format_version: u32,
    kind: String,
    config_digest: String,
    world_digest: String,
    steps: usize,
}

pub fn train(config: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let (_, wd) = load_world(out)?;
    let split = load_split(out, &wd)?;
    let records = load_records(out, &wd)?;
    let digest = config.digest();
    let outcome = pipeline::fit(config, &split, &records)?;
    let meta = BTreeMap::from([
        ("config_digest".to_string(), digest.clone()),
        ("world_digest".to_string(), wd.clone()),
    ]);
    checkpoint_save(&outcome.params, meta, &out.join(CHECKPOINT_FILE))?;
    let header = HistoryHeader {
        format_version: FORMAT_VERSION,
        kind: "loss_history".into(),
        config_digest: digest,
        world_digest: wd,
        steps: outcome.history.len(),
    };
    io::write_jsonl::<_, LossPoint>(&out.join(HISTORY_FILE), &header, &outcome.history)?;
    let first = outcome.history.first().map_or(f64::NAN, |p| p.loss);
    let last = outcome.history.last().map_or(f64::NAN, |p| p.loss);
    println!(
        "{} steps, loss {first:.4} -> {last:.4}, {} parameters",
        outcome.history.len(),
        outcome.params.num_parameters()
    );
    Ok(())
}

fn load_model(out: &Path, world_digest: &str) -> anyhow::Result<LeverLmParams> {
    let path = out.join(CHECKPOINT_FILE);
    let (params, meta) = checkpoint_load(&path)?;
    check_world(&path, meta.get("world_digest").map(String::as_str), world_digest)?;
    Ok(params)
}

#[derive(Debug, Serialize, Deserialize)]
struct GenerationsHeader {
    format_version: u32,
    kind: String,
    config_digest: String,
    world_digest: String,
    shots: Vec<usize>,
    queries: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct GenerationRecord {
    query_id: usize,
    shots: usize,
    icds: Vec<usize>,
    score: f64,
}

pub fn generate(config: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let (_, wd) = load_world(out)?;
    let split = load_split(out, &wd)?;
    let test = load_examples(out, TEST_FILE, &wd)?;
    let params = load_model(out, &wd)?;
    let generations = pipeline::generate_all(config, &params, &split.support, &test)?;
    let records: Vec<GenerationRecord> = generations
        .iter()
        .map(|(&(query_id, shots), s)| GenerationRecord {
            query_id,
            shots,
            icds: s.icds.clone(),
            score: s.score,
        })
        .collect();
    let header = GenerationsHeader {
        format_version: FORMAT_VERSION,
        kind: "generations".into(),
        config_digest: config.digest(),
        world_digest: wd,
        shots: config.evaluation.shots.clone(),
        queries: test.len(),
    };
    io::write_jsonl(&out.join(GENERATIONS_FILE), &header, &records)?;
    println!("{} sequences for {} queries", records.len(), test.len());
    Ok(())
}

fn load_generations(out: &Path, world_digest: &str) -> anyhow::Result<Generations> {
    let path = out.join(GENERATIONS_FILE);
    let (header, records): (GenerationsHeader, Vec<GenerationRecord>) = io::read_jsonl(&path, "generations")?;
    check_world(&path, Some(&header.world_digest), world_digest)?;
    Ok(records
        .into_iter()
        .map(|r| ((r.query_id, r.shots), IcdSequence::new(r.icds, r.score)))
        .collect())
}

pub fn evaluate(config: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let (world, wd) = load_world(out)?;
    let split = load_split(out, &wd)?;
    let test = load_examples(out, TEST_FILE, &wd)?;
    let params = load_model(out, &wd)?;
    let generations = load_generations(out, &wd)?;
    let golden = pipeline::golden_all(config, &params, &split)?;
    let eval = pipeline::evaluate(config, &world, &split.support, &test, &generations, &golden)?;
    let report = ReportFile::new(&config.digest(), &wd, eval.rows, eval.ablations);
    emit_report(&report, &out.join(REPORT_FILE), ReportFormat::Structured)?;
    for row in &report.rows {
        let cells: Vec<String> = row.accuracy.iter().map(|a| format!("{:.2}", 100.0 * a)).collect();
        println!("{:<9} {}", row.method, cells.join(" "));
    }
    Ok(())
}

pub fn report(out: &Path) -> anyhow::Result<()> {
    let report = load_report(&out.join(REPORT_FILE))?;
    let path: PathBuf = out.join(MARKDOWN_FILE);
    emit_report(&report, &path, ReportFormat::Markdown)?;
    println!("wrote {}", path.display());
    Ok(())
}

/// Coordinates sampled per model variant.
const GRAD_CHECK_COORDS: usize = 200;
const GRAD_CHECK_STEP: f64 = 1e-5;
const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

pub fn grad_check(config: &RunConfig) -> anyhow::Result<()> {
    let world = lever_core::world::world_generate(config.world.params())?;
    let support = sample_examples(&world, 16, config.training.seed);
    let queries = sample_examples(&world, 4, config.training.seed.wrapping_add(1));
    let k = config.construction.shots.min(support.len());
    let seqs: Vec<Vec<usize>> = (0..queries.len())
        .map(|i| (0..k).map(|j| (i * 5 + j * 3) % support.len()).collect())
        .collect();
    let samples: Vec<Sample> = queries
        .iter()
        .zip(&seqs)
        .map(|(q, s)| Sample { query: q, icds: s })
        .collect();
    let mut worst: f64 = 0.0;
    for arch in [Arch::Transformer, Arch::Lstm] {
        for encoder_trainable in [false, true] {
            let mut model = config.model.clone();
            model.arch = arch;
            model.encoder_trainable = encoder_trainable;
            let params = LeverLmParams::init(model, support.len(), world.feature_dim(), config.training.seed)?;
            let r = check_gradients(
                &params,
                &support,
                &samples,
                config.task_mode,
                GRAD_CHECK_COORDS,
                GRAD_CHECK_STEP,
                config.training.seed,
            )?;
            println!(
                "{arch:?} encoder_trainable={encoder_trainable}: max relative error {:.3e} over {} coordinates (worst {}[{}])",
                r.max_rel_error, r.coordinates, r.worst_tensor, r.worst_index
            );
            worst = worst.max(r.max_rel_error);
        }
    }
    println!("max relative error {worst:.3e}");
    if worst >= GRAD_CHECK_TOLERANCE {
        bail!("gradient check failed: {worst:.3e} >= {GRAD_CHECK_TOLERANCE:e}");
    }
    Ok(())
}

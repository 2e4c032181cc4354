//! In-memory composition of the stages, shared by the command-line tool and
//! end-to-end tests.

use std::collections::BTreeMap;

use crate::baselines::BaselineKind;
use crate::config::{validate_config, RunConfig};
use crate::construct::{build_dataset, reindex, split_anchor_set};
use crate::error::{Error, Result};
use crate::generate::{generate, golden_extract};
use crate::harness::{evaluate_method, random_order_ablation, BaselineMethod, EvalReport, FixedMethod, OrderAblation};
use crate::model::LeverLmParams;
use crate::rng::stream;
use crate::train::{train, TrainOutcome};
use crate::types::{ConstructionRecord, Example, IcdSequence};
use crate::world::{sample_examples_stream, world_generate, SynthWorld};

pub fn check(config: &RunConfig) -> Result<()> {
    let v = validate_config(config);
    if v.is_empty() {
        return Ok(());
    }
    let list: Vec<String> = v.iter().map(ToString::to_string).collect();
    Err(Error::Config(list.join("; ")))
}

/// World plus the sampled training pool and test queries.
pub struct WorldData {
    pub world: SynthWorld,
    pub pool: Vec<Example>,
    pub test: Vec<Example>,
}

pub fn make_world(config: &RunConfig) -> Result<WorldData> {
    check(config)?;
    let world = world_generate(config.world.params())?;
    let seed = config.world.seed;
    let pool = sample_examples_stream(&world, config.world.train_size, seed, stream::TRAIN_EXAMPLES);
    let test = sample_examples_stream(&world, config.world.test_size, seed, stream::TEST_QUERIES);
    Ok(WorldData { world, pool, test })
}

/// Anchors and supporting set, both renumbered from 0.
pub struct Split {
    pub anchors: Vec<Example>,
    pub support: Vec<Example>,
}

pub fn split(config: &RunConfig, pool: &[Example]) -> Result<Split> {
    let (anchors, support) = split_anchor_set(pool, config.construction.anchors, config.construction.seed)?;
    Ok(Split {
        anchors: reindex(anchors),
        support: reindex(support),
    })
}

pub fn construct(config: &RunConfig, world: &SynthWorld, split: &Split) -> Result<Vec<ConstructionRecord>> {
    build_dataset(world, &split.anchors, &split.support, &config.construction)
}

pub fn fit(config: &RunConfig, split: &Split, records: &[ConstructionRecord]) -> Result<TrainOutcome> {
    train(
        &config.model,
        records,
        &split.anchors,
        &split.support,
        &config.training,
        config.task_mode,
    )
}

/// Decoded sequences keyed by (query id, shots).
pub type Generations = BTreeMap<(usize, usize), IcdSequence>;

pub fn generate_all(config: &RunConfig, params: &LeverLmParams, support: &[Example], queries: &[Example]) -> Result<Generations> {
    use rayon::prelude::*;
    let decode = config.evaluation.decode_config();
    let shots = &config.evaluation.shots;
    let rows: Vec<Vec<((usize, usize), IcdSequence)>> = queries
        .par_iter()
        .map(|q| {
            shots
                .iter()
                .map(|&s| Ok(((q.id, s), generate(params, support, q, s, &decode, config.task_mode)?)))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| Error::AtQuery {
                    query: q.id,
                    source: Box::new(e),
                })
        })
        .collect::<Result<_>>()?;
    Ok(rows.into_iter().flatten().collect())
}

/// One golden sequence per evaluated shot count.
pub fn golden_all(config: &RunConfig, params: &LeverLmParams, split: &Split) -> Result<BTreeMap<usize, IcdSequence>> {
    let decode = config.evaluation.decode_config();
    config
        .evaluation
        .shots
        .iter()
        .map(|&s| {
            let g = golden_extract(
                params,
                &split.support,
                &split.anchors,
                s,
                config.evaluation.golden,
                &decode,
                config.task_mode,
            )?;
            Ok((s, g))
        })
        .collect()
}

pub struct Evaluation {
    pub rows: Vec<EvalReport>,
    pub ablations: Vec<OrderAblation>,
}

/// Scores Lever-LM, the four baselines, and the golden sequence on the test
/// queries, plus the order ablation at every shot count above one.
pub fn evaluate(
    config: &RunConfig,
    world: &SynthWorld,
    support: &[Example],
    test: &[Example],
    generations: &Generations,
    golden: &BTreeMap<usize, IcdSequence>,
) -> Result<Evaluation> {
    let shots = &config.evaluation.shots;
    let seed = config.evaluation.seed;
    let seeds = [config.world.seed, config.construction.seed, config.training.seed, seed];
    let digest = config.digest();
    let lever = FixedMethod::per_query(
        "Lever-LM",
        generations.iter().map(|(k, v)| (*k, v.icds.clone())).collect(),
    );
    let golden_method = FixedMethod::shared("Golden", golden.iter().map(|(k, v)| (*k, v.icds.clone())).collect());
    let mut rows = vec![evaluate_method(world, &lever, support, test, shots, &seeds, &digest)?];
    for kind in BaselineKind::ALL {
        let m = BaselineMethod { kind, support, seed };
        rows.push(evaluate_method(world, &m, support, test, shots, &seeds, &digest)?);
    }
    rows.push(evaluate_method(world, &golden_method, support, test, shots, &seeds, &digest)?);
    let mut ablations = Vec::new();
    for &s in shots.iter().filter(|&&s| s >= 2) {
        let at_shot: BTreeMap<usize, IcdSequence> = generations
            .iter()
            .filter(|((_, k), _)| *k == s)
            .map(|((q, _), v)| (*q, v.clone()))
            .collect();
        ablations.push(random_order_ablation(world, support, test, &at_shot, seed)?);
    }
    Ok(Evaluation { rows, ablations })
}

/// Every stage in sequence, without touching the filesystem.
pub struct RunOutcome {
    pub data: WorldData,
    pub split: Split,
    pub records: Vec<ConstructionRecord>,
    pub trained: TrainOutcome,
    pub generations: Generations,
    pub golden: BTreeMap<usize, IcdSequence>,
    pub evaluation: Evaluation,
}

pub fn run(config: &RunConfig) -> Result<RunOutcome> {
    let data = make_world(config)?;
    let split = split(config, &data.pool)?;
    let records = construct(config, &data.world, &split)?;
    let trained = fit(config, &split, &records)?;
    let generations = generate_all(config, &trained.params, &split.support, &data.test)?;
    let golden = golden_all(config, &trained.params, &split)?;
    let evaluation = evaluate(config, &data.world, &split.support, &data.test, &generations, &golden)?;
    Ok(RunOutcome {
        data,
        split,
        records,
        trained,
        generations,
        golden,
        evaluation,
    })
}

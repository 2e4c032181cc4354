//! Optimization: AdamW with decoupled weight decay, a linear-warmup cosine
//! schedule, seeded shuffling, and a finite-difference gradient checker.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, Gradients, LeverLmParams, ModelConfig, Sample, TaskMode};
use crate::rng::{self, stream};
use crate::types::{ConstructionRecord, Example};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-3,
            epochs: 20,
            batch_size: 64,
            warmup_fraction: 0.05,
            seed: 1,
        }
    }
}

/// Learning rate at `step` of `total_steps`: linear warmup from 0 over
/// `ceil(warmup_fraction * total_steps)` steps, then cosine decay to 0.
pub fn lr_at(step: usize, total_steps: usize, base_lr: f64, warmup_fraction: f64) -> f64 {
    let warmup = (warmup_fraction * total_steps as f64).ceil() as usize;
    if step < warmup {
        return base_lr * step as f64 / warmup as f64;
    }
    if step >= total_steps {
        return 0.0;
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub first_moment: BTreeMap<String, Array2<f64>>,
    pub second_moment: BTreeMap<String, Array2<f64>>,
    pub best_loss: f64,
}

impl TrainState {
    /// Zero moments for every trainable tensor of `params`.
    pub fn new(params: &LeverLmParams) -> Self {
        let zeros: BTreeMap<String, Array2<f64>> = params
            .tensors
            .iter()
            .filter(|(n, _)| params.is_trainable(n))
            .map(|(n, t)| (n.clone(), Array2::zeros(t.raw_dim())))
            .collect();
        Self {
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
            best_loss: f64::INFINITY,
        }
    }
}

/// One bias-corrected AdamW update. Frozen tensors are left untouched.
pub fn optimizer_step(
    params: &mut LeverLmParams,
    grads: &Gradients,
    state: &mut TrainState,
    hyper: &AdamW,
) -> Result<()> {
    for (name, p) in &params.tensors {
        if !params.is_trainable(name) {
            continue;
        }
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Schema(format!("no gradient for tensor `{name}`")))?;
        let m = state
            .first_moment
            .get(name)
            .ok_or_else(|| Error::Schema(format!("no optimizer state for tensor `{name}`")))?;
        if g.dim() != p.dim() || m.dim() != p.dim() {
            return Err(Error::Schema(format!(
                "shape mismatch for `{name}`: param {:?}, grad {:?}, state {:?}",
                p.dim(),
                g.dim(),
                m.dim()
            )));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    let trainable: Vec<String> = params
        .tensors
        .keys()
        .filter(|n| params.is_trainable(n))
        .cloned()
        .collect();
    for name in trainable {
        let p = params.tensors.get_mut(&name).unwrap();
        let g = &grads[&name];
        let m = state.first_moment.get_mut(&name).unwrap();
        let v = state.second_moment.get_mut(&name).unwrap();
        ndarray::Zip::from(p)
            .and(g)
            .and(m)
            .and(v)
            .for_each(|p, &g, m, v| {
                *p -= hyper.lr * hyper.weight_decay * *p;
                *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
                *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
            });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: LeverLmParams,
    pub history: Vec<LossPoint>,
    pub state: TrainState,
}

/// Flattens records into (anchor, sequence) training samples.
///
/// `anchors[i].id` must equal `i` and every record's `anchor_id` must index
/// into `anchors`. All sequences must share one length.
pub fn flatten_records<'a>(
    records: &'a [ConstructionRecord],
    anchors: &'a [Example],
) -> Result<Vec<Sample<'a>>> {
    let k = records.iter().find_map(ConstructionRecord::shots);
    let mut out = Vec::new();
    for rec in records {
        let anchor = anchors.get(rec.anchor_id).ok_or(Error::Index {
            what: "anchor set",
            index: rec.anchor_id,
            len: anchors.len(),
        })?;
        if anchor.id != rec.anchor_id {
            return Err(Error::Schema(format!(
                "anchor at position {} has id {}",
                rec.anchor_id, anchor.id
            )));
        }
        for seq in &rec.sequences {
            if Some(seq.len()) != k {
                return Err(Error::Schema(format!(
                    "training set mixes sequence lengths ({} vs {})",
                    seq.len(),
                    k.unwrap_or(0)
                )));
            }
            out.push(Sample {
                query: anchor,
                icds: &seq.icds,
            });
        }
    }
    Ok(out)
}

pub fn total_steps(samples: usize, config: &TrainConfig) -> usize {
    config.epochs * samples.div_ceil(config.batch_size)
}

/// Trains a freshly initialized model. Deterministic given the seed.
pub fn train(
    model_config: &ModelConfig,
    records: &[ConstructionRecord],
    anchors: &[Example],
    support: &[Example],
    config: &TrainConfig,
    mode: TaskMode,
) -> Result<TrainOutcome> {
    let samples = flatten_records(records, anchors)?;
    if samples.is_empty() {
        return Err(Error::Precondition("training set is empty".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let feature_dim = support.first().map_or(0, Example::feature_dim);
    let params = LeverLmParams::init(model_config.clone(), support.len(), feature_dim, config.seed)?;
    train_from(params, &samples, support, config, mode)
}

/// Continues training `params` on prepared samples.
pub fn train_from(
    mut params: LeverLmParams,
    samples: &[Sample<'_>],
    support: &[Example],
    config: &TrainConfig,
    mode: TaskMode,
) -> Result<TrainOutcome> {
    let total = total_steps(samples.len(), config);
    let mut state = TrainState::new(&params);
    let mut history = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut rng = rng::per_item_sub(config.seed, epoch, stream::SHUFFLE as usize);
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| samples[i]).collect();
            let (loss, grads) = model::loss_and_grad(&params, support, &batch, mode)?;
            if !loss.is_finite() {
                return Err(Error::Numeric { tensor: "loss".into() });
            }
            let lr = lr_at(step, total, config.lr, config.warmup_fraction);
            optimizer_step(&mut params, &grads, &mut state, &AdamW::new(lr, config.weight_decay))?;
            params.check_finite()?;
            state.best_loss = state.best_loss.min(loss);
            history.push(LossPoint { step, lr, loss });
            step += 1;
        }
    }
    Ok(TrainOutcome {
        params,
        history,
        state,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub worst_tensor: String,
    pub worst_index: usize,
}

/// Relative-error floor: coordinates whose analytic and numeric gradients
/// are both below this are compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares analytic gradients against central differences on `coords`
/// sampled coordinates, cycling through the trainable tensors.
pub fn grad_check(
    params: &LeverLmParams,
    support: &[Example],
    samples: &[Sample<'_>],
    mode: TaskMode,
    coords: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let (_, grads) = model::loss_and_grad(params, support, samples, mode)?;
    let names: Vec<&String> = params.tensors.keys().filter(|n| params.is_trainable(n)).collect();
    let mut rng = rng::seeded(seed, stream::GRAD_CHECK);
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        coordinates: 0,
        max_rel_error: 0.0,
        worst_tensor: String::new(),
        worst_index: 0,
    };
    for i in 0..coords {
        let name = names[i % names.len()];
        let len = params.tensors[name].len();
        let idx = rng.random_range(0..len);
        let original = params.tensors[name].as_slice().expect("standard layout")[idx];
        let mut eval_at = |x: f64| -> Result<f64> {
            probe.tensors.get_mut(name).unwrap().as_slice_mut().unwrap()[idx] = x;
            model::loss(&probe, support, samples, mode)
        };
        let plus = eval_at(original + step)?;
        let minus = eval_at(original - step)?;
        eval_at(original)?;
        let numeric = (plus - minus) / (2.0 * step);
        let analytic = grads[name].as_slice().unwrap()[idx];
        let denom = analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        let rel = (analytic - numeric).abs() / denom;
        report.coordinates += 1;
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_tensor = name.clone();
            report.worst_index = idx;
        }
    }
    Ok(report)
}

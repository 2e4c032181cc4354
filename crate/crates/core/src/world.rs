//! Synthetic in-context learning universe and the frozen predictor standing
//! in for a vision-language model.
//!
//! Each task `t` owns `C` class prototypes `mu[t][c]`. An example of task `t`
//! and class `c` has image features `mu[t][c] + sigma * eps`. The predictor
//! infers a posterior over tasks from the demonstrations it is shown, with a
//! recency discount `gamma` so that later demonstrations weigh more:
//!
//! ```text
//! log q(t) = sum_k gamma^(K-k) * -|x_k - mu[t][y_k]|^2 / (2 sigma^2)  + const
//! P(c | S, x') = sum_t q(t) * softmax_c(-|x' - mu[t][c]|^2 / (2 sigma^2))
//! ```
//!
//! Gaussian normalizing constants cancel and are dropped. With `gamma = 1` the
//! predictor is invariant to demonstration order.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, FORMAT_VERSION};
use crate::rng::{self, stream};
use crate::types::Example;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldParams {
    pub tasks: usize,
    pub classes: usize,
    pub feature_dim: usize,
    pub sigma: f64,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            tasks: 8,
            classes: 4,
            feature_dim: 16,
            sigma: 0.9,
            gamma: 0.85,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthWorld {
    params: WorldParams,
    /// Row-major `tasks x classes x feature_dim`.
    mu: Vec<f64>,
    /// Row-major `classes x feature_dim`.
    label_emb: Vec<f64>,
}

/// A demonstration as the predictor sees it: features and the class shown.
#[derive(Debug, Clone, Copy)]
pub struct Demo<'a> {
    pub img_feat: &'a [f64],
    pub class: usize,
}

impl<'a> Demo<'a> {
    /// The predictor reads the first label token as the demonstrated class.
    pub fn from_example(ex: &'a Example) -> Self {
        Self {
            img_feat: &ex.img_feat,
            class: ex.label[0],
        }
    }
}

pub fn world_generate(params: WorldParams) -> Result<SynthWorld> {
    check_params(&params)?;
    let mut rng = rng::seeded(params.seed, stream::WORLD);
    let (t, c, f) = (params.tasks, params.classes, params.feature_dim);
    let mu = (0..t * c * f).map(|_| rng.sample(StandardNormal)).collect();
    let label_emb = (0..c * f).map(|_| rng.sample(StandardNormal)).collect();
    Ok(SynthWorld {
        params,
        mu,
        label_emb,
    })
}

fn check_params(p: &WorldParams) -> Result<()> {
    if p.tasks == 0 || p.classes == 0 || p.feature_dim == 0 {
        return Err(Error::Config(format!(
            "world dimensions must be positive (tasks={}, classes={}, feature_dim={})",
            p.tasks, p.classes, p.feature_dim
        )));
    }
    if !(p.sigma >= 0.0 && p.sigma.is_finite()) {
        return Err(Error::Config(format!("sigma must be finite and >= 0, got {}", p.sigma)));
    }
    if !(p.gamma > 0.0 && p.gamma <= 1.0) {
        return Err(Error::Config(format!("gamma must lie in (0, 1], got {}", p.gamma)));
    }
    Ok(())
}

impl SynthWorld {
    /// Builds a world from explicit prototypes instead of a seed. Used for
    /// hand-checkable instances.
    pub fn from_parts(params: WorldParams, mu: Vec<f64>, label_emb: Vec<f64>) -> Result<Self> {
        check_params(&params)?;
        let (t, c, f) = (params.tasks, params.classes, params.feature_dim);
        if mu.len() != t * c * f || label_emb.len() != c * f {
            return Err(Error::Schema(format!(
                "prototype tensor sizes {}/{} do not match {t}x{c}x{f}",
                mu.len(),
                label_emb.len()
            )));
        }
        Ok(Self {
            params,
            mu,
            label_emb,
        })
    }

    pub fn params(&self) -> &WorldParams {
        &self.params
    }

    pub fn tasks(&self) -> usize {
        self.params.tasks
    }

    pub fn classes(&self) -> usize {
        self.params.classes
    }

    pub fn feature_dim(&self) -> usize {
        self.params.feature_dim
    }

    pub fn sigma(&self) -> f64 {
        self.params.sigma
    }

    pub fn gamma(&self) -> f64 {
        self.params.gamma
    }

    pub fn prototype(&self, task: usize, class: usize) -> &[f64] {
        let f = self.params.feature_dim;
        let start = (task * self.params.classes + class) * f;
        &self.mu[start..start + f]
    }

    pub fn label_embedding(&self, class: usize) -> &[f64] {
        let f = self.params.feature_dim;
        &self.label_emb[class * f..(class + 1) * f]
    }

    /// Same prototypes with a different recency discount.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        let params = WorldParams { gamma, ..self.params };
        check_params(&params)?;
        Ok(Self { params, ..self.clone() })
    }

    pub fn digest(&self) -> String {
        io::digest(&self.to_file())
    }

    fn log_lik(&self, x: &[f64], task: usize, class: usize) -> f64 {
        let sigma = self.params.sigma;
        -sq_dist(x, self.prototype(task, class)) / (2.0 * sigma * sigma)
    }

    /// Log posterior over tasks given the demonstrations, normalized.
    pub fn log_posterior(&self, icds: &[Demo<'_>]) -> Vec<f64> {
        let t_count = self.params.tasks;
        let k = icds.len();
        let mut logits = vec![0.0; t_count];
        for (idx, demo) in icds.iter().enumerate() {
            let w = self.params.gamma.powi((k - 1 - idx) as i32);
            for (t, l) in logits.iter_mut().enumerate() {
                *l += w * self.log_lik(demo.img_feat, t, demo.class);
            }
        }
        let z = log_sum_exp(&logits);
        logits.iter_mut().for_each(|l| *l -= z);
        logits
    }

    pub fn oracle_posterior(&self, icds: &[Demo<'_>]) -> Vec<f64> {
        self.log_posterior(icds).into_iter().map(f64::exp).collect()
    }

    /// Log predictive distribution over classes for a query.
    pub fn log_predict(&self, icds: &[Demo<'_>], query_img: &[f64]) -> Vec<f64> {
        let log_q = self.log_posterior(icds);
        let c_count = self.params.classes;
        let mut per_task = Vec::with_capacity(log_q.len() * c_count);
        for (t, lq) in log_q.iter().enumerate() {
            let ll: Vec<f64> = (0..c_count).map(|c| self.log_lik(query_img, t, c)).collect();
            let z = log_sum_exp(&ll);
            per_task.extend(ll.iter().map(|l| lq + l - z));
        }
        let mut out: Vec<f64> = (0..c_count)
            .map(|c| {
                let terms: Vec<f64> = (0..log_q.len()).map(|t| per_task[t * c_count + c]).collect();
                log_sum_exp(&terms)
            })
            .collect();
        // Re-normalize so rounding in the mixture cannot drift the total.
        let z = log_sum_exp(&out);
        out.iter_mut().for_each(|l| *l -= z);
        out
    }

    pub fn oracle_predict(&self, icds: &[Demo<'_>], query_img: &[f64]) -> Vec<f64> {
        self.log_predict(icds, query_img).into_iter().map(f64::exp).collect()
    }

    /// 1 when the predicted class (lowest index on ties) matches the query's
    /// first label token.
    pub fn oracle_accuracy(&self, icds: &[Demo<'_>], query: &Example) -> u8 {
        let pred = argmax(&self.log_predict(icds, &query.img_feat));
        u8::from(pred == query.label[0])
    }

    pub fn to_file(&self) -> WorldFile {
        let (t, c) = (self.params.tasks, self.params.classes);
        let mu = (0..t)
            .map(|ti| (0..c).map(|ci| self.prototype(ti, ci).to_vec()).collect())
            .collect();
        let label_emb = (0..c).map(|ci| self.label_embedding(ci).to_vec()).collect();
        WorldFile {
            format_version: FORMAT_VERSION,
            kind: WORLD_KIND.into(),
            params: self.params,
            mu,
            label_emb,
            config_digest: None,
        }
    }

    pub fn from_file(file: WorldFile) -> Result<Self> {
        let mu = file.mu.into_iter().flatten().flatten().collect();
        let label_emb = file.label_emb.into_iter().flatten().collect();
        let world = Self::from_parts(file.params, mu, label_emb)?;
        let regenerated = world_generate(world.params)?;
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        if bits(&regenerated.mu) != bits(&world.mu)
            || bits(&regenerated.label_emb) != bits(&world.label_emb)
        {
            return Err(Error::Schema(
                "world file prototypes do not match regeneration from its seed".into(),
            ));
        }
        Ok(world)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        io::write_document(path, &self.to_file())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_file(io::read_document(path, WORLD_KIND)?)
    }
}

pub const WORLD_KIND: &str = "world";

/// On-disk world: parameters plus the full prototype and label tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldFile {
    pub format_version: u32,
    pub kind: String,
    pub params: WorldParams,
    pub mu: Vec<Vec<Vec<f64>>>,
    pub label_emb: Vec<Vec<f64>>,
    /// Digest of the run configuration that produced the file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

/// Draws `count` examples with consecutive ids from 0.
pub fn sample_examples(world: &SynthWorld, count: usize, seed: u64) -> Vec<Example> {
    sample_examples_stream(world, count, seed, stream::TRAIN_EXAMPLES)
}

pub fn sample_examples_stream(
    world: &SynthWorld,
    count: usize,
    seed: u64,
    stream: u64,
) -> Vec<Example> {
    let mut rng = rng::seeded(seed, stream);
    let p = world.params;
    (0..count)
        .map(|id| {
            let task = rng.random_range(0..p.tasks);
            let class = rng.random_range(0..p.classes);
            let img_feat = world
                .prototype(task, class)
                .iter()
                .map(|m| {
                    let eps: f64 = rng.sample(StandardNormal);
                    m + p.sigma * eps
                })
                .collect();
            Example {
                id,
                img_feat,
                txt_feat: Some(world.label_embedding(class).to_vec()),
                label: vec![class],
                task,
            }
        })
        .collect()
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Index of the maximum, lowest index on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

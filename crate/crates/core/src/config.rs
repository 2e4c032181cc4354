//! Run configuration: one TOML document covering every pipeline stage.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::construct::{ConstructionConfig, SubSupportStrategy};
use crate::error::{Error, Result};
use crate::generate::{DecodeConfig, DecodeMode, GoldenMethod};
use crate::io;
use crate::model::{ModelConfig, TaskMode};
use crate::train::TrainConfig;
use crate::world::WorldParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub tasks: usize,
    pub classes: usize,
    pub feature_dim: usize,
    pub sigma: f64,
    pub gamma: f64,
    pub seed: u64,
    /// Training pool size; anchors are drawn from it and the rest is the
    /// supporting set.
    pub train_size: usize,
    pub test_size: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        let p = WorldParams::default();
        Self {
            tasks: p.tasks,
            classes: p.classes,
            feature_dim: p.feature_dim,
            sigma: p.sigma,
            gamma: p.gamma,
            seed: p.seed,
            train_size: 512,
            test_size: 1000,
        }
    }
}

impl WorldConfig {
    pub fn params(&self) -> WorldParams {
        WorldParams {
            tasks: self.tasks,
            classes: self.classes,
            feature_dim: self.feature_dim,
            sigma: self.sigma,
            gamma: self.gamma,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub shots: Vec<usize>,
    pub decode: DecodeMode,
    pub beam_width: usize,
    pub golden: GoldenMethod,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            shots: vec![1, 2, 3, 4, 6, 8],
            decode: DecodeMode::Greedy,
            beam_width: 3,
            golden: GoldenMethod::ModeOverAnchors,
            seed: 1,
        }
    }
}

impl EvalConfig {
    pub fn decode_config(&self) -> DecodeConfig {
        DecodeConfig {
            mode: self.decode,
            beam_width: self.beam_width,
            no_repeat: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task_mode: TaskMode,
    pub world: WorldConfig,
    pub construction: ConstructionConfig,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub evaluation: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task_mode: TaskMode::Image,
            world: WorldConfig::default(),
            construction: ConstructionConfig {
                strategy: SubSupportStrategy::SimImage,
                ..ConstructionConfig::default()
            },
            model: ModelConfig {
                adapter: false,
                ..ModelConfig::default()
            },
            training: TrainConfig {
                lr: DEFAULT_LR,
                ..TrainConfig::default()
            },
            evaluation: EvalConfig::default(),
        }
    }
}

/// Default learning rate for pipeline runs.
pub const DEFAULT_LR: f64 = 3e-3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub constraint: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.constraint)
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn digest(&self) -> String {
        io::digest(self)
    }

    /// Sets every stage seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.world.seed = seed;
        self.construction.seed = seed;
        self.training.seed = seed;
        self.evaluation.seed = seed;
    }

    pub fn support_size(&self) -> usize {
        self.world.train_size.saturating_sub(self.construction.anchors)
    }

    /// Applies `section.field=value`. Only existing scalar fields can be set.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
        let path = path.trim();
        let raw = raw.trim();
        let mut root = toml::Table::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let mut keys = path.split('.').peekable();
        let mut table = &mut root;
        let slot = loop {
            let key = keys.next().filter(|k| !k.is_empty()).ok_or_else(|| Error::Config(format!("bad key `{path}`")))?;
            let entry = table
                .get_mut(key)
                .ok_or_else(|| Error::Config(format!("unknown config key `{path}`")))?;
            if keys.peek().is_none() {
                break entry;
            }
            table = entry
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("`{key}` in `{path}` is not a section")))?;
        };
        if slot.is_table() || slot.is_array() {
            return Err(Error::Config(format!("`{path}` is not a scalar")));
        }
        let parsed: toml::Value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let value = match (&*slot, parsed) {
            (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
            (_, v) => v,
        };
        if std::mem::discriminant(&*slot) != std::mem::discriminant(&value) {
            return Err(Error::Config(format!("`{path}` expects a {}, got `{raw}`", slot.type_str())));
        }
        *slot = value;
        *self = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("`{path}`: {}", e.message())))?;
        Ok(())
    }
}

fn ordered_sequences(m: usize, k: usize) -> usize {
    (0..k).fold(1usize, |acc, i| acc.saturating_mul(m.saturating_sub(i)))
}

/// Every broken invariant, each naming its field and constraint.
pub fn validate_config(c: &RunConfig) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut check = |ok: bool, field: &str, constraint: String| {
        if !ok {
            out.push(Violation {
                field: field.to_string(),
                constraint,
            });
        }
    };
    let w = &c.world;
    for (name, v) in [
        ("world.tasks", w.tasks),
        ("world.classes", w.classes),
        ("world.feature_dim", w.feature_dim),
        ("world.train_size", w.train_size),
        ("world.test_size", w.test_size),
        ("construction.anchors", c.construction.anchors),
        ("construction.sub_support", c.construction.sub_support),
        ("construction.shots", c.construction.shots),
        ("construction.beam", c.construction.beam),
        ("model.d_model", c.model.d_model),
        ("model.heads", c.model.heads),
        ("model.layers", c.model.layers),
        ("model.ffn_mult", c.model.ffn_mult),
        ("model.max_shots", c.model.max_shots),
        ("training.epochs", c.training.epochs),
        ("training.batch_size", c.training.batch_size),
        ("evaluation.beam_width", c.evaluation.beam_width),
    ] {
        check(v > 0, name, "must be positive".into());
    }
    check(w.sigma > 0.0 && w.sigma.is_finite(), "world.sigma", "must be positive and finite".into());
    check(w.gamma > 0.0 && w.gamma <= 1.0, "world.gamma", "must lie in (0, 1]".into());
    check(
        c.construction.anchors < w.train_size,
        "construction.anchors",
        format!("must be less than world.train_size ({})", w.train_size),
    );
    let n = c.support_size();
    let cc = &c.construction;
    check(
        cc.sub_support <= n,
        "construction.sub_support",
        format!("must not exceed the supporting set size ({n})"),
    );
    check(
        cc.shots <= cc.sub_support,
        "construction.shots/construction.sub_support",
        format!("shots ({}) must not exceed sub_support ({})", cc.shots, cc.sub_support),
    );
    check(
        cc.beam <= ordered_sequences(cc.sub_support, cc.shots),
        "construction.beam",
        "must not exceed the number of ordered sequences".into(),
    );
    check(
        cc.shots <= c.model.max_shots,
        "construction.shots/model.max_shots",
        format!("shots ({}) must not exceed max_shots ({})", cc.shots, c.model.max_shots),
    );
    check(
        c.model.heads == 0 || c.model.d_model.is_multiple_of(c.model.heads),
        "model.d_model/model.heads",
        "d_model must be divisible by heads".into(),
    );
    let t = &c.training;
    check(t.lr > 0.0 && t.lr.is_finite(), "training.lr", "must be positive and finite".into());
    check(
        t.weight_decay >= 0.0 && t.weight_decay.is_finite(),
        "training.weight_decay",
        "must be non-negative".into(),
    );
    check(
        (0.0..1.0).contains(&t.warmup_fraction),
        "training.warmup_fraction",
        "must lie in [0, 1)".into(),
    );
    let shots = &c.evaluation.shots;
    check(!shots.is_empty(), "evaluation.shots", "must not be empty".into());
    check(shots.first().is_none_or(|&s| s > 0), "evaluation.shots", "must be positive".into());
    check(
        shots.windows(2).all(|p| p[0] < p[1]),
        "evaluation.shots",
        "must be strictly increasing".into(),
    );
    if let Some(&max) = shots.last() {
        check(
            max <= c.model.max_shots,
            "evaluation.shots/model.max_shots",
            format!("largest shot ({max}) must not exceed max_shots ({})", c.model.max_shots),
        );
        check(
            max <= n,
            "evaluation.shots",
            format!("largest shot ({max}) must not exceed the supporting set size ({n})"),
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        assert_eq!(validate_config(&RunConfig::default()), vec![]);
    }

    #[test]
    fn gamma_out_of_range() {
        let mut c = RunConfig::default();
        c.world.gamma = 1.5;
        let v = validate_config(&c);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "world.gamma");
    }

    #[test]
    fn shots_exceeding_sub_support() {
        let mut c = RunConfig::default();
        c.construction.sub_support = 4;
        c.construction.shots = 5;
        c.model.max_shots = 8;
        let v = validate_config(&c);
        assert!(v.iter().any(|x| x.field == "construction.shots/construction.sub_support"));
    }

    #[test]
    fn shot_list_order() {
        let mut c = RunConfig::default();
        c.evaluation.shots = vec![1, 3, 2];
        assert!(validate_config(&c).iter().any(|x| x.constraint.contains("increasing")));
    }

    #[test]
    fn toml_round_trip_and_partial_documents() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        let partial = RunConfig::from_toml("[world]\nsigma = 0.5\n").unwrap();
        assert_eq!(partial.world.sigma, 0.5);
        assert_eq!(partial.model, RunConfig::default().model);
        assert!(RunConfig::from_toml("[world]\nsigmaa = 0.5\n").is_err());
    }

    #[test]
    fn overrides() {
        let mut c = RunConfig::default();
        c.apply_override("world.gamma=1").unwrap();
        assert_eq!(c.world.gamma, 1.0);
        c.apply_override("construction.strategy=random").unwrap();
        assert_eq!(c.construction.strategy, SubSupportStrategy::Random);
        c.apply_override("model.adapter=true").unwrap();
        assert!(c.model.adapter);
        c.apply_override("training.epochs=3").unwrap();
        assert_eq!(c.training.epochs, 3);
        assert!(c.apply_override("world.nope=1").is_err());
        assert!(c.apply_override("world=1").is_err());
        assert!(c.apply_override("evaluation.shots=1").is_err());
        assert!(c.apply_override("training.epochs=many").is_err());
        assert!(c.apply_override("construction.strategy=sideways").is_err());
        assert!(c.apply_override("noequals").is_err());
    }

    #[test]
    fn digest_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.set_seed(9);
        assert_ne!(a.digest(), b.digest());
    }
}

//! Checkpoints: every tensor as shape plus row-major values in one JSON
//! document.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{LeverLmParams, ModelConfig};
use crate::error::{Error, Result};
use crate::io::{self, FORMAT_VERSION};

pub const CHECKPOINT_KIND: &str = "checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorFile {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointFile {
    pub format_version: u32,
    pub kind: String,
    pub model: ModelConfig,
    pub support_size: usize,
    pub feature_dim: usize,
    /// Free-form provenance (config and world digests).
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, TensorFile>,
}

impl CheckpointFile {
    pub fn from_params(params: &LeverLmParams, meta: BTreeMap<String, String>) -> Self {
        let tensors = params
            .tensors
            .iter()
            .map(|(name, t)| {
                let data = t.iter().copied().collect();
                (
                    name.clone(),
                    TensorFile {
                        shape: [t.nrows(), t.ncols()],
                        data,
                    },
                )
            })
            .collect();
        Self {
            format_version: FORMAT_VERSION,
            kind: CHECKPOINT_KIND.into(),
            model: params.config.clone(),
            support_size: params.support_size,
            feature_dim: params.feature_dim,
            meta,
            tensors,
        }
    }

    pub fn into_params(self) -> Result<LeverLmParams> {
        self.model.validate()?;
        let expected = LeverLmParams::expected_shapes(&self.model, self.support_size, self.feature_dim);
        if let Some(extra) = self.tensors.keys().find(|k| !expected.contains_key(*k)) {
            return Err(Error::Schema(format!("unexpected tensor `{extra}` in checkpoint")));
        }
        let mut tensors = BTreeMap::new();
        let mut stored = self.tensors;
        for (name, (rows, cols)) in expected {
            let t = stored
                .remove(&name)
                .ok_or_else(|| Error::Schema(format!("checkpoint is missing tensor `{name}`")))?;
            if t.shape != [rows, cols] || t.data.len() != rows * cols {
                return Err(Error::Schema(format!(
                    "tensor `{name}` has shape {:?} with {} values (expected [{rows}, {cols}])",
                    t.shape,
                    t.data.len()
                )));
            }
            let arr = Array2::from_shape_vec((rows, cols), t.data)
                .map_err(|e| Error::Schema(format!("tensor `{name}`: {e}")))?;
            tensors.insert(name, arr);
        }
        let params = LeverLmParams {
            config: self.model,
            support_size: self.support_size,
            feature_dim: self.feature_dim,
            tensors,
        };
        params.check_finite()?;
        Ok(params)
    }
}

pub fn checkpoint_save(params: &LeverLmParams, meta: BTreeMap<String, String>, path: &Path) -> Result<()> {
    params.check_finite()?;
    io::write_document(path, &CheckpointFile::from_params(params, meta))
}

pub fn checkpoint_load(path: &Path) -> Result<(LeverLmParams, BTreeMap<String, String>)> {
    let file: CheckpointFile = io::read_document(path, CHECKPOINT_KIND)?;
    let meta = file.meta.clone();
    Ok((file.into_params()?, meta))
}

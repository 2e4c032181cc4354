//! Shared data model: supporting-set examples, demonstration sequences and
//! construction records.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One entry of a supporting set (or a query, see [`QuerySample`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: usize,
    pub img_feat: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub txt_feat: Option<Vec<f64>>,
    pub label: Vec<usize>,
    /// Hidden task tag, kept for analysis only. Never read by the oracle.
    pub task: usize,
}

/// Queries share the example layout; the label is ground truth used only
/// for construction and evaluation, never for generation.
pub type QuerySample = Example;

impl Example {
    pub fn feature_dim(&self) -> usize {
        self.img_feat.len()
    }

    /// Checks the per-example invariants against a feature dimension and class count.
    pub fn validate(&self, feature_dim: usize, classes: Option<usize>) -> Result<()> {
        if self.img_feat.len() != feature_dim {
            return Err(Error::Schema(format!(
                "example {} has img_feat of length {} (expected {feature_dim})",
                self.id,
                self.img_feat.len()
            )));
        }
        if let Some(txt) = &self.txt_feat {
            if txt.len() != feature_dim {
                return Err(Error::Schema(format!(
                    "example {} has txt_feat of length {} (expected {feature_dim})",
                    self.id,
                    txt.len()
                )));
            }
        }
        if self.label.is_empty() {
            return Err(Error::Schema(format!("example {} has an empty label", self.id)));
        }
        if let Some(c) = classes {
            if let Some(&bad) = self.label.iter().find(|&&t| t >= c) {
                return Err(Error::Schema(format!(
                    "example {} has label token {bad} >= class count {c}",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// Checks that ids are unique and every example matches `feature_dim`.
pub fn validate_set(set: &[Example], feature_dim: usize, classes: Option<usize>) -> Result<()> {
    let mut seen = std::collections::HashSet::with_capacity(set.len());
    for ex in set {
        ex.validate(feature_dim, classes)?;
        if !seen.insert(ex.id) {
            return Err(Error::Schema(format!("duplicate example id {}", ex.id)));
        }
    }
    Ok(())
}

/// An ordered list of supporting-set ids with the score attached by whoever built it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcdSequence {
    pub icds: Vec<usize>,
    pub score: f64,
}

impl IcdSequence {
    pub fn new(icds: Vec<usize>, score: f64) -> Self {
        Self { icds, score }
    }

    pub fn len(&self) -> usize {
        self.icds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.icds.is_empty()
    }

    pub fn has_duplicates(&self) -> bool {
        let mut seen = std::collections::HashSet::with_capacity(self.icds.len());
        !self.icds.iter().all(|id| seen.insert(*id))
    }
}

/// One anchor with its top-scoring demonstration sequences, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstructionRecord {
    pub anchor_id: usize,
    pub sequences: Vec<IcdSequence>,
}

impl ConstructionRecord {
    /// Length shared by every sequence in the record.
    pub fn shots(&self) -> Option<usize> {
        self.sequences.first().map(IcdSequence::len)
    }

    pub fn validate(&self, support_len: usize) -> Result<()> {
        let k = self.shots().unwrap_or(0);
        for pair in self.sequences.windows(2) {
            if pair[0].score < pair[1].score {
                return Err(Error::Schema(format!(
                    "record for anchor {} is not sorted by score",
                    self.anchor_id
                )));
            }
        }
        for seq in &self.sequences {
            if seq.len() != k {
                return Err(Error::Schema(format!(
                    "record for anchor {} mixes sequence lengths",
                    self.anchor_id
                )));
            }
            if seq.has_duplicates() {
                return Err(Error::Schema(format!(
                    "record for anchor {} has a sequence with repeated ids",
                    self.anchor_id
                )));
            }
            if let Some(&bad) = seq.icds.iter().find(|&&id| id >= support_len) {
                return Err(Error::Index {
                    what: "supporting set",
                    index: bad,
                    len: support_len,
                });
            }
        }
        Ok(())
    }
}

/// Cosine similarity between two equal-length vectors.
///
/// Fails when either vector has zero norm.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Precondition(format!(
            "cosine of vectors with lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Precondition(
            "cosine similarity is undefined for a zero vector".into(),
        ));
    }
    Ok((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}

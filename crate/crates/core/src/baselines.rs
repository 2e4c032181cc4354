//! Retrieval baselines: random sampling and three cosine-similarity
//! retrievers that place the most similar demonstration last.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
pub use crate::types::cosine;
use crate::types::{Example, IcdSequence, QuerySample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BaselineKind {
    #[serde(rename = "RS")]
    Rs,
    #[serde(rename = "SIIR")]
    Siir,
    #[serde(rename = "SITR")]
    Sitr,
    #[serde(rename = "STTR")]
    Sttr,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [Self::Rs, Self::Siir, Self::Sitr, Self::Sttr];

    pub fn name(self) -> &'static str {
        match self {
            Self::Rs => "RS",
            Self::Siir => "SIIR",
            Self::Sitr => "SITR",
            Self::Sttr => "STTR",
        }
    }
}

impl std::fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn text<'a>(e: &'a Example, role: &str) -> Result<&'a [f64]> {
    e.txt_feat
        .as_deref()
        .ok_or_else(|| Error::Capability(format!("{role} {} has no text features", e.id)))
}

/// Similarity of `query` to every support example under a similarity kind.
pub fn similarities(kind: BaselineKind, query: &QuerySample, support: &[Example]) -> Result<Vec<f64>> {
    match kind {
        BaselineKind::Rs => Err(Error::Precondition("random sampling has no similarity".into())),
        BaselineKind::Siir => support.iter().map(|d| cosine(&query.img_feat, &d.img_feat)).collect(),
        BaselineKind::Sitr => support
            .iter()
            .map(|d| cosine(&query.img_feat, text(d, "support example")?))
            .collect(),
        BaselineKind::Sttr => {
            let q = text(query, "query")?;
            support.iter().map(|d| cosine(q, text(d, "support example")?)).collect()
        }
    }
}

/// Picks `k` demonstrations for `query`.
///
/// Returned ids are positions in `support`. For similarity kinds the score is
/// the mean similarity of the chosen examples; for random sampling it is 0.
pub fn retrieve(
    kind: BaselineKind,
    query: &QuerySample,
    support: &[Example],
    k: usize,
    seed: u64,
) -> Result<IcdSequence> {
    if k > support.len() {
        return Err(Error::Config(format!(
            "cannot retrieve {k} demonstrations from {} examples",
            support.len()
        )));
    }
    if kind == BaselineKind::Rs {
        let mut rng = rng::per_item_sub(seed, query.id, k);
        let icds = index::sample(&mut rng, support.len(), k).into_vec();
        return Ok(IcdSequence::new(icds, 0.0));
    }
    let sims = similarities(kind, query, support)?;
    let mut order: Vec<usize> = (0..support.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_by(|&a, &b| sims[a].total_cmp(&sims[b]).then(a.cmp(&b)));
    let mean = if k == 0 {
        0.0
    } else {
        order.iter().map(|&i| sims[i]).sum::<f64>() / k as f64
    };
    Ok(IcdSequence::new(order, mean))
}

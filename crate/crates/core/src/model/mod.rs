//! The demonstration-sequence model: a vocabulary made of the supporting set
//! plus `[BOS]`, `[EOS]` and `[QUERY]`, token embeddings that add a learned
//! vector to projected image and text features, and a small causal
//! transformer (or LSTM) with an untied output head.
//!
//! Training rows have the layout
//!
//! ```text
//! [BOS] [QUERY]+x' d_1 ... d_K [EOS]
//! ```
//!
//! and the loss is the mean cross-entropy of predicting `d_1..d_K, [EOS]`
//! from the positions before them.

mod checkpoint;
pub mod tape;

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{checkpoint_load, checkpoint_save, CheckpointFile, TensorFile, CHECKPOINT_KIND};
use tape::{SeqShape, Tape, Var};

use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::types::{ConstructionRecord, Example};

/// Supporting-set ids occupy `[0, n)`; the three specials follow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocabulary {
    pub n: usize,
}

impl Vocabulary {
    pub fn bos(&self) -> usize {
        self.n
    }
    pub fn eos(&self) -> usize {
        self.n + 1
    }
    pub fn query(&self) -> usize {
        self.n + 2
    }
    pub fn size(&self) -> usize {
        self.n + 3
    }
    pub fn is_example(&self, token: usize) -> bool {
        token < self.n
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Transformer,
    Lstm,
}

/// Which query features are embedded: image only (captioning-style) or
/// image plus text (question-answering-style).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    Image,
    ImageText,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_mult: usize,
    pub adapter: bool,
    /// When false the feature projection receives no gradient.
    pub encoder_trainable: bool,
    /// Longest sequence the positional table covers.
    pub max_shots: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Transformer,
            d_model: 128,
            heads: 4,
            layers: 2,
            ffn_mult: 4,
            adapter: true,
            encoder_trainable: false,
            max_shots: 8,
        }
    }
}

impl ModelConfig {
    /// Positions needed for `[BOS] [QUERY] d_1..d_max [EOS]`.
    pub fn max_len(&self) -> usize {
        self.max_shots + 3
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.layers == 0 || self.heads == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

/// How a tensor is initialized.
#[derive(Debug, Clone, Copy)]
enum Init {
    /// Normal with std 0.02.
    Small,
    /// Normal with std 1/sqrt(fan_in).
    FanIn,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeverLmParams {
    pub config: ModelConfig,
    pub support_size: usize,
    pub feature_dim: usize,
    pub tensors: BTreeMap<String, Array2<f64>>,
}

fn layout(config: &ModelConfig, n: usize, f: usize) -> Vec<(String, (usize, usize), Init)> {
    let v = n + 3;
    let d = config.d_model;
    let mut out = vec![
        ("token_emb".to_string(), (v, d), Init::Small),
        ("proj".to_string(), (d, f), Init::Small),
        ("pos_emb".to_string(), (config.max_len(), d), Init::Small),
        ("ln_f.gain".to_string(), (1, d), Init::Ones),
        ("ln_f.bias".to_string(), (1, d), Init::Zeros),
        ("head".to_string(), (v, d), Init::Small),
    ];
    if config.adapter {
        out.push(("adapter.w1".into(), (f, f), Init::FanIn));
        out.push(("adapter.b1".into(), (1, f), Init::Zeros));
        out.push(("adapter.w2".into(), (f, f), Init::FanIn));
        out.push(("adapter.b2".into(), (1, f), Init::Zeros));
    }
    for l in 0..config.layers {
        match config.arch {
            Arch::Transformer => {
                let h = d * config.ffn_mult;
                let p = format!("block{l}");
                out.push((format!("{p}.ln1.gain"), (1, d), Init::Ones));
                out.push((format!("{p}.ln1.bias"), (1, d), Init::Zeros));
                for w in ["wq", "wk", "wv", "wo"] {
                    out.push((format!("{p}.attn.{w}"), (d, d), Init::FanIn));
                }
                for b in ["bq", "bk", "bv", "bo"] {
                    out.push((format!("{p}.attn.{b}"), (1, d), Init::Zeros));
                }
                out.push((format!("{p}.ln2.gain"), (1, d), Init::Ones));
                out.push((format!("{p}.ln2.bias"), (1, d), Init::Zeros));
                out.push((format!("{p}.ffn.w1"), (h, d), Init::FanIn));
                out.push((format!("{p}.ffn.b1"), (1, h), Init::Zeros));
                out.push((format!("{p}.ffn.w2"), (d, h), Init::FanIn));
                out.push((format!("{p}.ffn.b2"), (1, d), Init::Zeros));
            }
            Arch::Lstm => {
                let p = format!("lstm{l}");
                out.push((format!("{p}.w_ih"), (4 * d, d), Init::FanIn));
                out.push((format!("{p}.w_hh"), (4 * d, d), Init::FanIn));
                out.push((format!("{p}.bias"), (1, 4 * d), Init::Zeros));
            }
        }
    }
    out
}

impl LeverLmParams {
    /// Expected tensor shapes for a configuration, by name.
    pub fn expected_shapes(
        config: &ModelConfig,
        support_size: usize,
        feature_dim: usize,
    ) -> BTreeMap<String, (usize, usize)> {
        layout(config, support_size, feature_dim)
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect()
    }

    pub fn zeros(config: ModelConfig, support_size: usize, feature_dim: usize) -> Result<Self> {
        config.validate()?;
        let tensors = layout(&config, support_size, feature_dim)
            .into_iter()
            .map(|(name, shape, _)| (name, Array2::zeros(shape)))
            .collect();
        Ok(Self {
            config,
            support_size,
            feature_dim,
            tensors,
        })
    }

    pub fn init(config: ModelConfig, support_size: usize, feature_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::seeded(seed, stream::MODEL_INIT);
        let mut entries = layout(&config, support_size, feature_dim);
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        let mut tensors = BTreeMap::new();
        for (name, shape, init) in entries {
            let normal = |std: f64, rng: &mut rng::Rng| {
                let dist = Normal::new(0.0, std).expect("valid std");
                Array2::from_shape_simple_fn(shape, || dist.sample(rng))
            };
            let t = match init {
                Init::Small => normal(0.02, &mut rng),
                Init::FanIn => normal(1.0 / (shape.1 as f64).sqrt(), &mut rng),
                Init::Zeros => Array2::zeros(shape),
                Init::Ones => Array2::ones(shape),
            };
            tensors.insert(name, t);
        }
        Ok(Self {
            config,
            support_size,
            feature_dim,
            tensors,
        })
    }

    pub fn vocab(&self) -> Vocabulary {
        Vocabulary { n: self.support_size }
    }

    /// Whether the optimizer may update the named tensor.
    pub fn is_trainable(&self, name: &str) -> bool {
        !(name == "proj" && !self.config.encoder_trainable)
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.values().map(Array2::len).sum()
    }

    pub fn tensor(&self, name: &str) -> &Array2<f64> {
        &self.tensors[name]
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in &self.tensors {
            if !t.iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric { tensor: name.clone() });
            }
        }
        Ok(())
    }
}

/// One input row and the query whose features ride on `[QUERY]`.
#[derive(Debug, Clone, Copy)]
pub struct SeqInput<'a> {
    pub tokens: &'a [usize],
    pub query: &'a Example,
}

struct Graph<'p> {
    tape: Tape<'p>,
    vars: BTreeMap<&'p str, Var>,
}

impl<'p> Graph<'p> {
    fn new(params: &'p LeverLmParams) -> Self {
        let mut tape = Tape::new();
        let vars = params
            .tensors
            .iter()
            .map(|(n, t)| (n.as_str(), tape.param(n.as_str(), t)))
            .collect();
        Self { tape, vars }
    }

    fn p(&self, name: &str) -> Var {
        self.vars[name]
    }
}

fn check_support(params: &LeverLmParams, support: &[Example]) -> Result<()> {
    if support.len() != params.support_size {
        return Err(Error::Schema(format!(
            "model vocabulary covers {} examples, supporting set has {}",
            params.support_size,
            support.len()
        )));
    }
    if let Some((i, e)) = support.iter().enumerate().find(|(i, e)| e.id != *i) {
        return Err(Error::Schema(format!(
            "supporting set entry {i} has id {}; ids must be consecutive from 0",
            e.id
        )));
    }
    Ok(())
}

/// Projected features `P(adapter(x))` for a stack of feature rows.
fn project_features(g: &mut Graph<'_>, params: &LeverLmParams, feats: Vec<&[f64]>) -> Var {
    let f = params.feature_dim;
    let mut m = Array2::zeros((feats.len(), f));
    for (i, x) in feats.iter().enumerate() {
        m.row_mut(i).assign(&ndarray::ArrayView1::from(*x));
    }
    let mut x = g.tape.constant(m);
    if params.config.adapter {
        let (w1, b1, w2, b2) = (g.p("adapter.w1"), g.p("adapter.b1"), g.p("adapter.w2"), g.p("adapter.b2"));
        let h = g.tape.linear(x, w1, Some(b1));
        let h = g.tape.gelu(h);
        x = g.tape.linear(h, w2, Some(b2));
    }
    let proj = g.p("proj");
    g.tape.matmul_t(x, proj)
}

/// Token embeddings (no positions) for packed rows.
fn embed_rows(
    g: &mut Graph<'_>,
    params: &LeverLmParams,
    support: &[Example],
    inputs: &[SeqInput<'_>],
    mode: TaskMode,
) -> Result<Var> {
    let vocab = params.vocab();
    let mut tokens = Vec::new();
    let mut img: Vec<(usize, &[f64])> = Vec::new();
    let mut txt: Vec<(usize, &[f64])> = Vec::new();
    for input in inputs {
        for &tok in input.tokens {
            let row = tokens.len();
            if tok >= vocab.size() {
                return Err(Error::Index {
                    what: "vocabulary",
                    index: tok,
                    len: vocab.size(),
                });
            }
            tokens.push(tok);
            if vocab.is_example(tok) {
                let ex = &support[tok];
                img.push((row, &ex.img_feat));
                if let Some(t) = &ex.txt_feat {
                    txt.push((row, t));
                }
            } else if tok == vocab.query() {
                img.push((row, &input.query.img_feat));
                if mode == TaskMode::ImageText {
                    let t = input.query.txt_feat.as_deref().ok_or_else(|| {
                        Error::Capability(format!(
                            "query {} has no text features for image+text mode",
                            input.query.id
                        ))
                    })?;
                    txt.push((row, t));
                }
            }
        }
    }
    for (_, x) in img.iter().chain(&txt) {
        if x.len() != params.feature_dim {
            return Err(Error::Schema(format!(
                "feature vector of length {} (model expects {})",
                x.len(),
                params.feature_dim
            )));
        }
    }
    let n = tokens.len();
    let table = g.p("token_emb");
    let mut x = g.tape.gather(table, tokens);
    for feats in [img, txt] {
        if feats.is_empty() {
            continue;
        }
        let (rows, vecs): (Vec<usize>, Vec<&[f64]>) = feats.into_iter().unzip();
        let p = project_features(g, params, vecs);
        let s = g.tape.scatter(p, rows, n);
        x = g.tape.add(x, s);
    }
    Ok(x)
}

fn build_logits(
    g: &mut Graph<'_>,
    params: &LeverLmParams,
    support: &[Example],
    inputs: &[SeqInput<'_>],
    mode: TaskMode,
) -> Result<(Var, SeqShape)> {
    check_support(params, support)?;
    let len = inputs.first().map_or(0, |i| i.tokens.len());
    if inputs.iter().any(|i| i.tokens.len() != len) {
        return Err(Error::Schema("rows in one batch must share a length".into()));
    }
    if len == 0 {
        return Err(Error::Precondition("empty input row".into()));
    }
    if len > params.config.max_len() {
        return Err(Error::Length {
            len,
            max: params.config.max_len(),
        });
    }
    let shape = SeqShape {
        batch: inputs.len(),
        len,
    };
    let cfg = &params.config;
    let emb = embed_rows(g, params, support, inputs, mode)?;
    let positions: Vec<usize> = (0..shape.batch).flat_map(|_| 0..len).collect();
    let pos_table = g.p("pos_emb");
    let pos = g.tape.gather(pos_table, positions);
    let mut x = g.tape.add(emb, pos);

    for l in 0..cfg.layers {
        match cfg.arch {
            Arch::Transformer => {
                let name = |s: &str| format!("block{l}.{s}");
                let v = |g: &Graph<'_>, s: &str| g.p(&name(s));
                let h = g.tape.layer_norm(x, v(g, "ln1.gain"), v(g, "ln1.bias"), "ln1");
                let q = g.tape.linear(h, v(g, "attn.wq"), Some(v(g, "attn.bq")));
                let k = g.tape.linear(h, v(g, "attn.wk"), Some(v(g, "attn.bk")));
                let vv = g.tape.linear(h, v(g, "attn.wv"), Some(v(g, "attn.bv")));
                let a = g.tape.causal_attention(q, k, vv, shape, cfg.heads);
                let o = g.tape.linear(a, v(g, "attn.wo"), Some(v(g, "attn.bo")));
                x = g.tape.add(x, o);
                let h = g.tape.layer_norm(x, v(g, "ln2.gain"), v(g, "ln2.bias"), "ln2");
                let f = g.tape.linear(h, v(g, "ffn.w1"), Some(v(g, "ffn.b1")));
                let f = g.tape.gelu(f);
                let f = g.tape.linear(f, v(g, "ffn.w2"), Some(v(g, "ffn.b2")));
                x = g.tape.add(x, f);
            }
            Arch::Lstm => {
                let p = format!("lstm{l}");
                let (w_ih, w_hh, b) = (
                    g.p(&format!("{p}.w_ih")),
                    g.p(&format!("{p}.w_hh")),
                    g.p(&format!("{p}.bias")),
                );
                let xp = g.tape.linear(x, w_ih, Some(b));
                x = g.tape.lstm(xp, w_hh, shape);
            }
        }
    }
    let h = g.tape.layer_norm(x, g.p("ln_f.gain"), g.p("ln_f.bias"), "ln_f");
    let head = g.p("head");
    Ok((g.tape.matmul_t(h, head), shape))
}

/// Embedding of one token as the model sees it before positions are added.
pub fn embed_token(
    params: &LeverLmParams,
    token: usize,
    support: &[Example],
) -> Result<Array1<f64>> {
    let vocab = params.vocab();
    if token >= vocab.size() {
        return Err(Error::Index {
            what: "vocabulary",
            index: token,
            len: vocab.size(),
        });
    }
    if token == vocab.query() {
        // Bare [QUERY] without features.
        return Ok(params.tensor("token_emb").row(token).to_owned());
    }
    check_support(params, support)?;
    let dummy = &support.first().cloned().unwrap_or(Example {
        id: 0,
        img_feat: vec![0.0; params.feature_dim],
        txt_feat: None,
        label: vec![0],
        task: 0,
    });
    let tokens = [token];
    let mut g = Graph::new(params);
    let x = embed_rows(
        &mut g,
        params,
        support,
        &[SeqInput { tokens: &tokens, query: dummy }],
        TaskMode::Image,
    )?;
    Ok(g.tape.value(x).row(0).to_owned())
}

/// The `[QUERY]+x'` embedding.
pub fn embed_query(params: &LeverLmParams, query: &Example, mode: TaskMode) -> Result<Array1<f64>> {
    let tokens = [params.vocab().query()];
    let mut g = Graph::new(params);
    let x = embed_rows(&mut g, params, &[], &[SeqInput { tokens: &tokens, query }], mode)?;
    Ok(g.tape.value(x).row(0).to_owned())
}

/// Logits for packed rows of equal length: `(batch * len) x V`.
pub fn forward(
    params: &LeverLmParams,
    support: &[Example],
    inputs: &[SeqInput<'_>],
    mode: TaskMode,
) -> Result<Array2<f64>> {
    let mut g = Graph::new(params);
    let (logits, _) = build_logits(&mut g, params, support, inputs, mode)?;
    Ok(g.tape.value(logits).to_owned())
}

/// Logits for a single row: `len x V`.
pub fn forward_row(
    params: &LeverLmParams,
    support: &[Example],
    tokens: &[usize],
    query: &Example,
    mode: TaskMode,
) -> Result<Array2<f64>> {
    forward(params, support, &[SeqInput { tokens, query }], mode)
}

/// One training sample: a query and one of its demonstration sequences.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub query: &'a Example,
    pub icds: &'a [usize],
}

/// Input row `[BOS] [QUERY] d_1..d_K`; `[EOS]` is only ever a target.
pub fn input_row(vocab: Vocabulary, icds: &[usize]) -> Vec<usize> {
    let mut row = Vec::with_capacity(icds.len() + 2);
    row.push(vocab.bos());
    row.push(vocab.query());
    row.extend_from_slice(icds);
    row
}

fn loss_graph<'p>(
    params: &'p LeverLmParams,
    support: &[Example],
    samples: &[Sample<'_>],
    mode: TaskMode,
) -> Result<(Graph<'p>, Var)> {
    let vocab = params.vocab();
    let k = samples.first().map_or(0, |s| s.icds.len());
    if samples.iter().any(|s| s.icds.len() != k) {
        return Err(Error::Schema("all sequences in a batch must share their length".into()));
    }
    let mut g = Graph::new(params);
    if samples.is_empty() {
        let head = g.p("head");
        let loss = g.tape.cross_entropy(head, Vec::new());
        return Ok((g, loss));
    }
    if k == 0 {
        return Err(Error::Precondition("sequences must hold at least one demonstration".into()));
    }
    if let Some(&bad) = samples.iter().flat_map(|s| s.icds).find(|&&id| !vocab.is_example(id)) {
        return Err(Error::Index {
            what: "supporting set",
            index: bad,
            len: vocab.n,
        });
    }
    let rows: Vec<Vec<usize>> = samples.iter().map(|s| input_row(vocab, s.icds)).collect();
    let inputs: Vec<SeqInput> = rows
        .iter()
        .zip(samples)
        .map(|(r, s)| SeqInput {
            tokens: r,
            query: s.query,
        })
        .collect();
    let (logits, shape) = build_logits(&mut g, params, support, &inputs, mode)?;
    let mut targets = Vec::with_capacity(samples.len() * (k + 1));
    for (b, s) in samples.iter().enumerate() {
        let base = b * shape.len;
        for (j, &id) in s.icds.iter().enumerate() {
            targets.push((base + 1 + j, id));
        }
        targets.push((base + 1 + k, vocab.eos()));
    }
    let loss = g.tape.cross_entropy(logits, targets);
    Ok((g, loss))
}

/// Mean cross-entropy over the `K + 1` targets of every sample.
pub fn loss(
    params: &LeverLmParams,
    support: &[Example],
    samples: &[Sample<'_>],
    mode: TaskMode,
) -> Result<f64> {
    let (g, l) = loss_graph(params, support, samples, mode)?;
    Ok(g.tape.scalar(l))
}

/// Loss over every sequence of a construction record.
pub fn record_loss(
    params: &LeverLmParams,
    support: &[Example],
    record: &ConstructionRecord,
    anchor: &Example,
    mode: TaskMode,
) -> Result<f64> {
    let samples: Vec<Sample> = record
        .sequences
        .iter()
        .map(|s| Sample {
            query: anchor,
            icds: &s.icds,
        })
        .collect();
    loss(params, support, &samples, mode)
}

pub type Gradients = BTreeMap<String, Array2<f64>>;

/// Loss and exact gradients for every tensor. Frozen tensors get zeros.
pub fn loss_and_grad(
    params: &LeverLmParams,
    support: &[Example],
    samples: &[Sample<'_>],
    mode: TaskMode,
) -> Result<(f64, Gradients)> {
    let (g, l) = loss_graph(params, support, samples, mode)?;
    if let Some(name) = g.tape.first_non_finite() {
        return Err(Error::Numeric { tensor: name });
    }
    let value = g.tape.scalar(l);
    let mut grads = g.tape.backward(l)?;
    for (name, t) in &params.tensors {
        let trainable = params.is_trainable(name);
        let entry = grads
            .entry(name.clone())
            .or_insert_with(|| Array2::zeros(t.raw_dim()));
        if !trainable {
            entry.fill(0.0);
        }
    }
    Ok((value, grads))
}

//! Minimal reverse-mode differentiation over 2-D `f64` matrices.
//!
//! Only the operations the sequence model needs are provided. Attention,
//! the LSTM recurrence, layer normalization and the cross-entropy loss are
//! fused ops with hand-written backward passes.

use std::collections::BTreeMap;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Value<'p> {
    Owned(Array2<f64>),
    Param(&'p str, &'p Array2<f64>),
}

enum Op {
    Leaf,
    /// `a * b^T`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// `a + b` with `b` a single row broadcast over `a`'s rows.
    AddRow(Var, Var),
    Gather(Var, Vec<usize>),
    Scatter(Var, Vec<usize>),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: SeqShape,
        heads: usize,
        /// Softmax weights per (sequence, head), each `len x len`.
        probs: Vec<Array2<f64>>,
    },
    Lstm {
        xp: Var,
        w_hh: Var,
        shape: SeqShape,
        /// Gate activations `[i, f, g, o]` per row, `n x 4d`.
        gates: Array2<f64>,
        /// Cell state per row, `n x d`.
        cell: Array2<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<(usize, usize)>,
        probs: Array2<f64>,
    },
}

/// Rows are laid out sequence-major: row `b * len + t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeqShape {
    pub batch: usize,
    pub len: usize,
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
    label: &'static str,
}

#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const LN_EPS: f64 = 1e-5;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Array2<f64>, op: Op, label: &'static str) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            label,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> ArrayView2<'_, f64> {
        match &self.nodes[v.0].value {
            Value::Owned(a) => a.view(),
            Value::Param(_, a) => a.view(),
        }
    }

    /// A named parameter; gradients are reported under its name.
    pub fn param(&mut self, name: &'p str, value: &'p Array2<f64>) -> Var {
        self.nodes.push(Node {
            value: Value::Param(name, value),
            op: Op::Leaf,
            label: "param",
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, "constant")
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).dot(&self.value(b).t());
        self.push(y, Op::MatMulT(a, b), "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = &self.value(a) + &self.value(b);
        self.push(y, Op::Add(a, b), "add")
    }

    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let y = &self.value(a) + &self.value(b);
        self.push(y, Op::AddRow(a, b), "add_row")
    }

    /// Linear layer `x * w^T + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul_t(x, w);
        match b {
            Some(b) => self.add_row(y, b),
            None => y,
        }
    }

    pub fn gather(&mut self, table: Var, rows: Vec<usize>) -> Var {
        let t = self.value(table);
        let mut y = Array2::zeros((rows.len(), t.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            y.row_mut(i).assign(&t.row(r));
        }
        self.push(y, Op::Gather(table, rows), "gather")
    }

    /// Places row `i` of `src` at row `rows[i]` of an `n_rows` zero matrix.
    /// `rows` must be distinct.
    pub fn scatter(&mut self, src: Var, rows: Vec<usize>, n_rows: usize) -> Var {
        let s_val = self.value(src);
        let mut y = Array2::zeros((n_rows, s_val.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            y.row_mut(r).assign(&s_val.row(i));
        }
        self.push(y, Op::Scatter(src, rows), "scatter")
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(gelu);
        self.push(y, Op::Gelu(a), "gelu")
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, label: &'static str) -> Var {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut xhat = Array2::zeros(xv.raw_dim());
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for (row, mut out) in xv.rows().into_iter().zip(xhat.rows_mut()) {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            Zip::from(&mut out).and(&row).for_each(|o, &v| *o = (v - mean) * inv);
            inv_std.push(inv);
        }
        let y = &(&xhat * &self.value(gain)) + &self.value(bias);
        self.push(
            y,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            label,
        )
    }

    /// Causal multi-head attention over packed sequences. `q`, `k`, `v` are
    /// `(batch * len) x d` projections.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, shape: SeqShape, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let len = shape.len;
        let mut out = Array2::zeros((shape.batch * len, d));
        let mut probs = Vec::with_capacity(shape.batch * heads);
        for b in 0..shape.batch {
            let rows = b * len..(b + 1) * len;
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = qv.slice(s![rows.clone(), cols.clone()]);
                let kh = kv.slice(s![rows.clone(), cols.clone()]);
                let vh = vv.slice(s![rows.clone(), cols.clone()]);
                let mut p = qh.dot(&kh.t());
                for i in 0..len {
                    let mut row = p.row_mut(i);
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        row[j] *= scale;
                        max = max.max(row[j]);
                    }
                    let mut z = 0.0;
                    for j in 0..=i {
                        row[j] = (row[j] - max).exp();
                        z += row[j];
                    }
                    for j in 0..len {
                        row[j] = if j <= i { row[j] / z } else { 0.0 };
                    }
                }
                out.slice_mut(s![rows.clone(), cols]).assign(&p.dot(&vh));
                probs.push(p);
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                shape,
                heads,
                probs,
            },
            "attention",
        )
    }

    /// LSTM recurrence given the input projection `xp = x W_ih^T + b`
    /// (`n x 4d`, gate order i, f, g, o) and the recurrent weights `w_hh`
    /// (`4d x d`). Returns the hidden states, `n x d`. Zero initial state.
    pub fn lstm(&mut self, xp: Var, w_hh: Var, shape: SeqShape) -> Var {
        let xpv = self.value(xp);
        let whh = self.value(w_hh);
        let d = whh.ncols();
        let n = shape.batch * shape.len;
        let mut gates = Array2::zeros((n, 4 * d));
        let mut cell = Array2::zeros((n, d));
        let mut hidden = Array2::zeros((n, d));
        for b in 0..shape.batch {
            for t in 0..shape.len {
                let r = b * shape.len + t;
                let mut z = xpv.row(r).to_owned();
                if t > 0 {
                    z += &whh.dot(&hidden.row(r - 1));
                }
                for j in 0..d {
                    let i_g = sigmoid(z[j]);
                    let f_g = sigmoid(z[d + j]);
                    let g_g = z[2 * d + j].tanh();
                    let o_g = sigmoid(z[3 * d + j]);
                    let c_prev = if t > 0 { cell[[r - 1, j]] } else { 0.0 };
                    let c = f_g * c_prev + i_g * g_g;
                    cell[[r, j]] = c;
                    hidden[[r, j]] = o_g * c.tanh();
                    gates[[r, j]] = i_g;
                    gates[[r, d + j]] = f_g;
                    gates[[r, 2 * d + j]] = g_g;
                    gates[[r, 3 * d + j]] = o_g;
                }
            }
        }
        self.push(
            hidden,
            Op::Lstm {
                xp,
                w_hh,
                shape,
                gates,
                cell,
            },
            "lstm",
        )
    }

    /// Mean cross-entropy over `(row, target)` pairs; `0` when there are none.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<(usize, usize)>) -> Var {
        let lv = self.value(logits);
        let mut probs = Array2::zeros(lv.raw_dim());
        for (row, mut out) in lv.rows().into_iter().zip(probs.rows_mut()) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            Zip::from(&mut out).and(&row).for_each(|o, &v| {
                *o = (v - max).exp();
                z += *o;
            });
            out.mapv_inplace(|o| o / z);
        }
        let mut loss = 0.0;
        for &(r, t) in &targets {
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        if !targets.is_empty() {
            loss /= targets.len() as f64;
        }
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
            "cross_entropy",
        )
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    /// Name of the first node holding a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        self.nodes.iter().find_map(|n| {
            let (label, finite) = match &n.value {
                Value::Owned(a) => (n.label.to_string(), a.iter().all(|v| v.is_finite())),
                Value::Param(name, a) => (name.to_string(), a.iter().all(|v| v.is_finite())),
            };
            (!finite).then_some(label)
        })
    }

    /// Reverse pass from a scalar output. Returns gradients keyed by
    /// parameter name (parameters that did not influence `out` are absent).
    pub fn backward(&self, out: Var) -> Result<BTreeMap<String, Array2<f64>>> {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Array2::from_elem((1, 1), 1.0));

        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=out.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(dy);
                }
                Op::MatMulT(a, b) => {
                    let da = dy.dot(&self.value(*b));
                    let db = dy.t().dot(&self.value(*a));
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, dy.clone());
                    acc(&mut grads, *a, dy);
                }
                Op::AddRow(a, b) => {
                    let db = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *b, db);
                    acc(&mut grads, *a, dy);
                }
                Op::Gather(table, rows) => {
                    let shape = self.value(*table).raw_dim();
                    let mut dt = Array2::zeros(shape);
                    for (i, &r) in rows.iter().enumerate() {
                        let mut target = dt.row_mut(r);
                        target += &dy.row(i);
                    }
                    acc(&mut grads, *table, dt);
                }
                Op::Scatter(src, rows) => {
                    let mut ds = Array2::zeros((rows.len(), dy.ncols()));
                    for (i, &r) in rows.iter().enumerate() {
                        ds.row_mut(i).assign(&dy.row(r));
                    }
                    acc(&mut grads, *src, ds);
                }
                Op::Gelu(a) => {
                    let mut da = self.value(*a).mapv(gelu_grad);
                    da *= &dy;
                    acc(&mut grads, *a, da);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let dgain = (&dy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dbias = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &dy * &self.value(*gain);
                    let d = dxhat.ncols() as f64;
                    let mut dx = Array2::zeros(dxhat.raw_dim());
                    for (r, mut out) in dx.rows_mut().into_iter().enumerate() {
                        let g = dxhat.row(r);
                        let xh = xhat.row(r);
                        let mean_g = g.sum() / d;
                        let mean_gx = g.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
                        for j in 0..out.len() {
                            out[j] = inv_std[r] * (g[j] - mean_g - xh[j] * mean_gx);
                        }
                    }
                    acc(&mut grads, *gain, dgain);
                    acc(&mut grads, *bias, dbias);
                    acc(&mut grads, *x, dx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    shape,
                    heads,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = qv.ncols();
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let len = shape.len;
                    let mut dq = Array2::zeros(qv.raw_dim());
                    let mut dk = Array2::zeros(kv.raw_dim());
                    let mut dv = Array2::zeros(vv.raw_dim());
                    for b in 0..shape.batch {
                        let rows = b * len..(b + 1) * len;
                        for h in 0..*heads {
                            let cols = h * dh..(h + 1) * dh;
                            let p = &probs[b * heads + h];
                            let dout = dy.slice(s![rows.clone(), cols.clone()]);
                            let vh = vv.slice(s![rows.clone(), cols.clone()]);
                            let qh = qv.slice(s![rows.clone(), cols.clone()]);
                            let kh = kv.slice(s![rows.clone(), cols.clone()]);
                            dv.slice_mut(s![rows.clone(), cols.clone()]).assign(&p.t().dot(&dout));
                            let dp = dout.dot(&vh.t());
                            let mut ds = Array2::zeros((len, len));
                            for i in 0..len {
                                let dot: f64 = (0..=i).map(|j| dp[[i, j]] * p[[i, j]]).sum();
                                for j in 0..=i {
                                    ds[[i, j]] = p[[i, j]] * (dp[[i, j]] - dot) * scale;
                                }
                            }
                            dq.slice_mut(s![rows.clone(), cols.clone()]).assign(&ds.dot(&kh));
                            dk.slice_mut(s![rows.clone(), cols]).assign(&ds.t().dot(&qh));
                        }
                    }
                    acc(&mut grads, *q, dq);
                    acc(&mut grads, *k, dk);
                    acc(&mut grads, *v, dv);
                }
                Op::Lstm {
                    xp,
                    w_hh,
                    shape,
                    gates,
                    cell,
                } => {
                    let whh = self.value(*w_hh);
                    let hidden = self.value(Var(idx));
                    let d = whh.ncols();
                    let n = shape.batch * shape.len;
                    let mut dz_all = Array2::zeros((n, 4 * d));
                    let mut dwhh = Array2::zeros(whh.raw_dim());
                    for b in 0..shape.batch {
                        let mut dh_next = ndarray::Array1::<f64>::zeros(d);
                        let mut dc_next = ndarray::Array1::<f64>::zeros(d);
                        for t in (0..shape.len).rev() {
                            let r = b * shape.len + t;
                            let mut dz = ndarray::Array1::<f64>::zeros(4 * d);
                            for j in 0..d {
                                let (i_g, f_g, g_g, o_g) =
                                    (gates[[r, j]], gates[[r, d + j]], gates[[r, 2 * d + j]], gates[[r, 3 * d + j]]);
                                let c = cell[[r, j]];
                                let tc = c.tanh();
                                let dh = dy[[r, j]] + dh_next[j];
                                let d_o = dh * tc;
                                let dc = dh * o_g * (1.0 - tc * tc) + dc_next[j];
                                let c_prev = if t > 0 { cell[[r - 1, j]] } else { 0.0 };
                                dz[j] = dc * g_g * i_g * (1.0 - i_g);
                                dz[d + j] = dc * c_prev * f_g * (1.0 - f_g);
                                dz[2 * d + j] = dc * i_g * (1.0 - g_g * g_g);
                                dz[3 * d + j] = d_o * o_g * (1.0 - o_g);
                                dc_next[j] = dc * f_g;
                            }
                            if t > 0 {
                                let h_prev = hidden.row(r - 1);
                                for (gi, &g) in dz.iter().enumerate() {
                                    if g != 0.0 {
                                        let mut w_row = dwhh.row_mut(gi);
                                        w_row.scaled_add(g, &h_prev);
                                    }
                                }
                                dh_next = whh.t().dot(&dz);
                            } else {
                                dh_next.fill(0.0);
                            }
                            dz_all.row_mut(r).assign(&dz);
                        }
                    }
                    acc(&mut grads, *w_hh, dwhh);
                    acc(&mut grads, *xp, dz_all);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let mut dl = Array2::zeros(probs.raw_dim());
                    if !targets.is_empty() {
                        let scale = dy[[0, 0]] / targets.len() as f64;
                        for &(r, t) in targets {
                            let mut row = dl.row_mut(r);
                            row.scaled_add(scale, &probs.row(r));
                            row[t] -= scale;
                        }
                    }
                    acc(&mut grads, *logits, dl);
                }
            }
        }

        let mut out_grads: BTreeMap<String, Array2<f64>> = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Value::Param(name, _), Some(g)) = (&node.value, grads[idx].take()) {
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(Error::Numeric {
                        tensor: name.to_string(),
                    });
                }
                match out_grads.get_mut(*name) {
                    Some(existing) => *existing += &g,
                    None => {
                        out_grads.insert(name.to_string(), g);
                    }
                }
            }
        }
        Ok(out_grads)
    }
}

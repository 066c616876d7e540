//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] borrows a [`ParamStore`] immutably, so any number of forward
//! passes may run concurrently against the same weights. Gradients come back
//! as a [`Gradients`] value and are applied by the optimizer afterwards.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{dot, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Attention masking applied inside [`Graph::attention`].
#[derive(Clone, Debug, Default)]
pub struct AttentionMask {
    /// `false` entries are keys no query may attend to.
    pub key_valid: Option<Vec<bool>>,
    /// Query `i` only sees keys `j <= i`.
    pub causal: bool,
}

impl AttentionMask {
    pub fn none() -> Self {
        Self::default()
    }

    fn allows(&self, query: usize, key: usize) -> bool {
        if self.causal && key > query {
            return false;
        }
        self.key_valid.as_ref().is_none_or(|valid| valid[key])
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    QuickGelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<Tensor> },
    SelectRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ReplaceRows { x: Var, fill: Var, indices: Vec<usize> },
    NormalizeRows { x: Var, norms: Vec<f64> },
    Objective { input: Var, grad: Tensor },
}

struct Node {
    op: Op,
    value: Option<Tensor>,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: BTreeMap<ParamId, Var>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self { store, nodes: Vec::new(), param_nodes: BTreeMap::new() }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value: Some(value) });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => self.store.get(*id),
            (_, Some(t)) => t,
            (_, None) => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        self.nodes.push(Node { op: Op::Param(id), value: None });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), out)
    }

    /// `a · bᵀ`; linear layers store weights as `out × in`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_nt(self.value(b));
        self.push(Op::MatMulNT(a, b), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), out)
    }

    /// Adds the `1×n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let bias = self.value(b);
        assert_eq!(bias.rows(), 1, "add_row expects a row vector");
        let mut out = self.value(a).clone();
        assert_eq!(out.cols(), bias.cols(), "add_row column mismatch");
        for r in 0..out.rows() {
            for (o, &x) in out.row_mut(r).iter_mut().zip(bias.data()) {
                *o += x;
            }
        }
        self.push(Op::AddRow(a, b), out)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(Op::Scale(a, s), out)
    }

    /// `x · σ(1.702 x)`, the GELU approximation used by CLIP.
    pub fn quick_gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(1.702 * x));
        self.push(Op::QuickGelu(a), out)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Tensor::zeros(rows, cols);
        let mut out = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / libm::sqrt(var + eps);
            inv_std.push(inv);
            for c in 0..cols {
                let h = (row[c] - mean) * inv;
                xhat.set(r, c, h);
                out.set(r, c, h * g[c] + b[c]);
            }
        }
        self.push(Op::LayerNorm { x, gamma, beta, xhat, inv_std }, out)
    }

    /// Multi-head scaled dot-product attention over already-projected
    /// queries, keys and values; each head uses `1/sqrt(d_head)` scaling.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: &AttentionMask) -> Var {
        let (out, probs) = attention_forward(self.value(q), self.value(k), self.value(v), heads, mask);
        self.push(Op::Attention { q, k, v, heads, probs }, out)
    }

    pub fn select_rows(&mut self, x: Var, indices: &[usize]) -> Var {
        let out = self.value(x).select_rows(indices);
        self.push(Op::SelectRows(x, indices.to_vec()), out)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&values);
        self.push(Op::ConcatRows(parts.to_vec()), out)
    }

    /// Copies `x`, overwriting each row in `indices` with the `1×n` row `fill`.
    pub fn replace_rows(&mut self, x: Var, fill: Var, indices: &[usize]) -> Var {
        let f = self.value(fill);
        assert_eq!(f.rows(), 1, "replace_rows fill must be a row vector");
        let mut out = self.value(x).clone();
        for &i in indices {
            out.row_mut(i).copy_from_slice(f.data());
        }
        self.push(Op::ReplaceRows { x, fill, indices: indices.to_vec() }, out)
    }

    /// L2-normalizes every row. Callers guarantee non-zero rows.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let n = crate::tensor::norm(xv.row(r));
            norms.push(n);
            for o in out.row_mut(r) {
                *o /= n;
            }
        }
        self.push(Op::NormalizeRows { x, norms }, out)
    }

    /// A scalar whose value and gradient with respect to `input` were
    /// computed in closed form by the caller.
    pub fn objective(&mut self, input: Var, value: f64, grad: Tensor) -> Var {
        assert_eq!(self.value(input).shape(), grad.shape(), "objective gradient shape mismatch");
        self.push(Op::Objective { input, grad }, Tensor::scalar(value))
    }

    pub fn backward(&self, root: Var) -> Gradients {
        let root_shape = self.value(root).shape();
        assert_eq!(root_shape, (1, 1), "backward expects a scalar root");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf | Op::Param(_) => unreachable!(),
                Op::MatMul(a, b) => {
                    let da = g.matmul_nt(self.value(*b));
                    let db = self.value(*a).matmul_tn(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulNT(a, b) => {
                    let da = g.matmul(self.value(*b));
                    let db = g.matmul_tn(self.value(*a));
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, b) => {
                    let mut db = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, &x) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    accumulate(&mut grads, *b, db);
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s)),
                Op::QuickGelu(a) => {
                    let d = self.value(*a).zip_map(&g, |x, gy| {
                        let s = sigmoid(1.702 * x);
                        gy * (s + 1.702 * x * s * (1.0 - s))
                    });
                    accumulate(&mut grads, *a, d);
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let (rows, cols) = xhat.shape();
                    let gam = self.value(*gamma).data();
                    let mut dx = Tensor::zeros(rows, cols);
                    let mut dgamma = Tensor::zeros(1, cols);
                    let mut dbeta = Tensor::zeros(1, cols);
                    let n = cols as f64;
                    for r in 0..rows {
                        let gy = g.row(r);
                        let xh = xhat.row(r);
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for c in 0..cols {
                            let d = gy[c] * gam[c];
                            sum_d += d;
                            sum_dx += d * xh[c];
                            dgamma.data_mut()[c] += gy[c] * xh[c];
                            dbeta.data_mut()[c] += gy[c];
                        }
                        let inv = inv_std[r];
                        for c in 0..cols {
                            let d = gy[c] * gam[c];
                            dx.set(r, c, inv / n * (n * d - sum_d - xh[c] * sum_dx));
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, dgamma);
                    accumulate(&mut grads, *beta, dbeta);
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (dq, dk, dv) =
                        attention_backward(self.value(*q), self.value(*k), self.value(*v), *heads, probs, &g);
                    accumulate(&mut grads, *q, dq);
                    accumulate(&mut grads, *k, dk);
                    accumulate(&mut grads, *v, dv);
                }
                Op::SelectRows(x, indices) => {
                    let xv = self.value(*x);
                    let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                    for (out_row, &i) in indices.iter().enumerate() {
                        for (d, &gv) in dx.row_mut(i).iter_mut().zip(g.row(out_row)) {
                            *d += gv;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        let idx: Vec<usize> = (offset..offset + rows).collect();
                        accumulate(&mut grads, p, g.select_rows(&idx));
                        offset += rows;
                    }
                }
                Op::ReplaceRows { x, fill, indices } => {
                    let mut dx = g;
                    let mut dfill = Tensor::zeros(1, dx.cols());
                    for &i in indices {
                        for (d, s) in dfill.data_mut().iter_mut().zip(dx.row_mut(i)) {
                            *d += *s;
                            *s = 0.0;
                        }
                    }
                    accumulate(&mut grads, *fill, dfill);
                    accumulate(&mut grads, *x, dx);
                }
                Op::NormalizeRows { x, norms } => {
                    let y = node.value.as_ref().expect("normalize value");
                    let mut dx = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let proj = dot(yr, gr);
                        for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                            *d = (gr[c] - yr[c] * proj) / norms[r];
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Objective { input, grad } => {
                    accumulate(&mut grads, *input, grad.scale(g.item()));
                }
            }
        }

        let params = self.param_nodes.iter().filter_map(|(&id, &v)| grads[v.0].take().map(|g| (id, g))).collect();
        Gradients { nodes: grads, params }
    }
}

/// Gradients of a scalar root with respect to leaves and parameters.
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient for an [`Graph::input`] leaf; `None` if it did not reach the root.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(&id, g)| (id, g))
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

/// Returns the attention output and the per-head `N_q × N_k` weights.
pub(crate) fn attention_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    mask: &AttentionMask,
) -> (Tensor, Vec<Tensor>) {
    let (nq, d) = q.shape();
    let nk = k.rows();
    assert_eq!(k.cols(), d, "query/key width mismatch");
    assert_eq!(v.rows(), nk, "key/value count mismatch");
    assert_eq!(v.cols(), d, "value width mismatch");
    assert!(heads > 0 && d % heads == 0, "width {d} not divisible by {heads} heads");
    let dh = d / heads;
    let scale = 1.0 / libm::sqrt(dh as f64);
    let mut out = Tensor::zeros(nq, d);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let off = h * dh;
        let mut p = Tensor::zeros(nq, nk);
        for i in 0..nq {
            let qi = &q.row(i)[off..off + dh];
            let row = p.row_mut(i);
            let mut max = f64::NEG_INFINITY;
            for (j, slot) in row.iter_mut().enumerate() {
                if mask.allows(i, j) {
                    let s = dot(qi, &k.row(j)[off..off + dh]) * scale;
                    *slot = s;
                    max = max.max(s);
                } else {
                    *slot = f64::NEG_INFINITY;
                }
            }
            if max == f64::NEG_INFINITY {
                row.iter_mut().for_each(|x| *x = 0.0);
                continue;
            }
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = if *x == f64::NEG_INFINITY { 0.0 } else { libm::exp(*x - max) };
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        for i in 0..nq {
            let pi = p.row(i);
            let oi = &mut out.row_mut(i)[off..off + dh];
            for (j, &w) in pi.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                for (o, &x) in oi.iter_mut().zip(&v.row(j)[off..off + dh]) {
                    *o += w * x;
                }
            }
        }
        probs.push(p);
    }
    (out, probs)
}

fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    probs: &[Tensor],
    g: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (nq, d) = q.shape();
    let nk = k.rows();
    let dh = d / heads;
    let scale = 1.0 / libm::sqrt(dh as f64);
    let mut dq = Tensor::zeros(nq, d);
    let mut dk = Tensor::zeros(nk, d);
    let mut dv = Tensor::zeros(nk, d);
    let mut dp = vec![0.0; nk];
    for (h, p) in probs.iter().enumerate() {
        let off = h * dh;
        for i in 0..nq {
            let gi = &g.row(i)[off..off + dh];
            let pi = p.row(i);
            for j in 0..nk {
                dp[j] = dot(gi, &v.row(j)[off..off + dh]);
                if pi[j] != 0.0 {
                    for (dvx, &gx) in dv.row_mut(j)[off..off + dh].iter_mut().zip(gi) {
                        *dvx += pi[j] * gx;
                    }
                }
            }
            let inner: f64 = pi.iter().zip(&dp).map(|(a, b)| a * b).sum();
            for j in 0..nk {
                let ds = pi[j] * (dp[j] - inner) * scale;
                if ds == 0.0 {
                    continue;
                }
                let kj = &k.row(j)[off..off + dh];
                for (dqx, &kx) in dq.row_mut(i)[off..off + dh].iter_mut().zip(kj) {
                    *dqx += ds * kx;
                }
                let qi = &q.row(i)[off..off + dh];
                for (dkx, &qx) in dk.row_mut(j)[off..off + dh].iter_mut().zip(qi) {
                    *dkx += ds * qx;
                }
            }
        }
    }
    (dq, dk, dv)
}

//! Layers built on [`Graph`] ops. Each layer only holds [`ParamId`]s;
//! values live in the shared [`ParamStore`].

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autograd::{AttentionMask, Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;
const MLP_RATIO: usize = 4;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights are `out × in`, drawn from `N(0, 1/in)`; biases start at zero.
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let std = 1.0 / libm::sqrt(in_dim as f64);
        let weight = store.add_normal(format!("{name}.weight"), out_dim, in_dim, std, rng);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(1, out_dim)));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul_nt(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::filled(1, dim, 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(1, dim));
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }
}

/// Multi-head attention with learned query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, bias: bool, rng: &mut impl Rng) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "{name}: width {dim} not divisible by {heads} heads");
        Self {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, bias, rng),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, bias, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, bias, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, bias, rng),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, queries: Var, keys: Var, values: Var, mask: &AttentionMask) -> Var {
        let q = self.query.forward(g, queries);
        let k = self.key.forward(g, keys);
        let v = self.value.forward(g, values);
        let a = g.attention(q, k, v, self.heads, mask);
        self.out.forward(g, a)
    }
}

/// Pre-norm block: `x + attn(LN(x))`, then `x + mlp(LN(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_mlp: LayerNorm,
    pub fc: Linear,
    pub proj: Linear,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_1"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, true, rng),
            ln_mlp: LayerNorm::new(store, &format!("{name}.ln_2"), dim),
            fc: Linear::new(store, &format!("{name}.mlp.fc"), dim, dim * MLP_RATIO, true, rng),
            proj: Linear::new(store, &format!("{name}.mlp.proj"), dim * MLP_RATIO, dim, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mask: &AttentionMask) -> Var {
        let h = self.ln_attn.forward(g, x);
        let a = self.attn.forward(g, h, h, h, mask);
        let x = g.add(x, a);
        let h = self.ln_mlp.forward(g, x);
        let h = self.fc.forward(g, h);
        let h = g.quick_gelu(h);
        let h = self.proj.forward(g, h);
        g.add(x, h)
    }
}

pub fn blocks(store: &mut ParamStore, prefix: &str, depth: usize, dim: usize, heads: usize, rng: &mut impl Rng) -> Vec<TransformerBlock> {
    (0..depth).map(|i| TransformerBlock::new(store, &format!("{prefix}.{i}"), dim, heads, rng)).collect()
}

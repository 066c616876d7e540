//! Text-guided image restoration.
//!
//! A fraction of image patches is masked, the masked image and the caption
//! are encoded, and a light decoder uses the masked-image states as queries
//! over the text states to predict the original pixels of every masked
//! patch. The decoder's interaction layer can be wired three ways, see
//! [`DecoderVariant`].

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{attention_forward, AttentionMask, Graph, Var};
use crate::encoders::{patchify, ImageTensor};
use crate::error::{Error, Result};
use crate::nn::{blocks, LayerNorm, Linear, MultiHeadAttention, TransformerBlock};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Set of masked patch indices, kept sorted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    num_patches: usize,
    indices: Vec<usize>,
}

impl MaskPlan {
    pub fn from_indices(num_patches: usize, mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Domain("mask indices must be unique".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= num_patches) {
            return Err(Error::OutOfRange { what: "patches", index: bad, bound: num_patches });
        }
        Ok(Self { num_patches, indices })
    }

    /// Skips validation; used to exercise the encoder's own range checks.
    #[doc(hidden)]
    pub fn from_raw_unchecked(num_patches: usize, indices: Vec<usize>) -> Self {
        Self { num_patches, indices }
    }

    pub fn num_patches(&self) -> usize {
        self.num_patches
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn ratio(&self) -> f64 {
        if self.num_patches == 0 {
            0.0
        } else {
            self.indices.len() as f64 / self.num_patches as f64
        }
    }

    pub fn contains(&self, patch: usize) -> bool {
        self.indices.binary_search(&patch).is_ok()
    }
}

/// `floor(num_patches × ratio)`. The tiny slack absorbs binary rounding of
/// decimal ratios such as `0.3`, which the floor would otherwise turn into an
/// off-by-one.
pub fn masked_count(num_patches: usize, ratio: f64) -> usize {
    libm::floor(num_patches as f64 * ratio + 1e-9) as usize
}

/// Uniformly samples `floor(N × ratio)` distinct patches without replacement.
pub fn sample_mask(num_patches: usize, ratio: f64, rng: &mut impl Rng) -> Result<MaskPlan> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Domain(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let count = masked_count(num_patches, ratio).min(num_patches);
    let mut indices = index::sample(rng, num_patches, count).into_vec();
    indices.sort_unstable();
    Ok(MaskPlan { num_patches, indices })
}

/// Multi-head cross-attention `softmax(Q Kᵀ / √d_h) V` over pre-projected
/// inputs, one head per contiguous `d/heads` column block.
pub fn mca(queries: &Tensor, keys: &Tensor, values: &Tensor, heads: usize) -> Result<Tensor> {
    mca_with_weights(queries, keys, values, heads).map(|(out, _)| out)
}

/// Like [`mca`], also returning each head's `N_q × N_k` attention weights.
pub fn mca_with_weights(queries: &Tensor, keys: &Tensor, values: &Tensor, heads: usize) -> Result<(Tensor, Vec<Tensor>)> {
    let d = queries.cols();
    if keys.cols() != d || values.cols() != d {
        return Err(Error::Shape(format!(
            "query width {d}, key width {}, value width {}",
            keys.cols(),
            values.cols()
        )));
    }
    if keys.rows() != values.rows() {
        return Err(Error::Shape(format!("{} keys but {} values", keys.rows(), values.rows())));
    }
    if keys.rows() == 0 {
        return Err(Error::Shape("cross-attention needs at least one key".into()));
    }
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Shape(format!("width {d} not divisible by {heads} heads")));
    }
    Ok(attention_forward(queries, keys, values, heads, &AttentionMask::none()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderVariant {
    /// Image states query the text states only.
    Cross,
    /// Image self-attention plus image-to-text cross-attention, summed.
    Fuse,
    /// Self-attention over the concatenated image and text states.
    Concat,
}

impl DecoderVariant {
    pub const ALL: [DecoderVariant; 3] = [Self::Cross, Self::Fuse, Self::Concat];

    pub fn name(self) -> &'static str {
        match self {
            Self::Cross => "cross",
            Self::Fuse => "fuse",
            Self::Concat => "concat",
        }
    }
}

impl FromStr for DecoderVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross" => Ok(Self::Cross),
            "fuse" => Ok(Self::Fuse),
            "concat" => Ok(Self::Concat),
            other => Err(Error::Config(format!("unknown decoder variant `{other}` (expected cross, fuse or concat)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub depth: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub variant: DecoderVariant,
    /// Apply the interaction layer norm to the queries only, leaving the
    /// projected text keys/values unnormalized.
    #[serde(default)]
    pub norm_queries_only: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { depth: 4, hidden_dim: 512, num_heads: 8, variant: DecoderVariant::Cross, norm_queries_only: false }
    }
}

impl DecoderConfig {
    pub fn toy() -> Self {
        Self { depth: 2, hidden_dim: 64, num_heads: 4, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("decoder depth must be at least 1".into()));
        }
        if self.num_heads == 0 || !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "decoder hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

/// Decoder intermediates: `interaction` is the raw attention output of the
/// interaction layer (before the residual), `context` the final states.
#[derive(Clone, Copy, Debug)]
pub struct DecoderOutput {
    pub interaction: Var,
    pub context: Var,
}

/// Cross-modal interaction decoder.
///
/// Queries come from one modality and keys/values from the other; the
/// restoration task uses image queries over text, and the same structure
/// serves masked-token recovery with the roles reversed.
#[derive(Clone, Debug)]
pub struct CrossModalDecoder {
    pub query_proj: Linear,
    pub context_proj: Linear,
    pub ln_query: LayerNorm,
    pub ln_context: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub self_attn: Option<MultiHeadAttention>,
    pub blocks: Vec<TransformerBlock>,
    pub ln_out: LayerNorm,
    pub variant: DecoderVariant,
    pub norm_queries_only: bool,
}

impl CrossModalDecoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &DecoderConfig,
        query_dim: usize,
        context_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden_dim;
        Ok(Self {
            query_proj: Linear::new(store, &format!("{prefix}.query_proj"), query_dim, h, true, rng),
            context_proj: Linear::new(store, &format!("{prefix}.context_proj"), context_dim, h, true, rng),
            ln_query: LayerNorm::new(store, &format!("{prefix}.ln_query"), h),
            ln_context: LayerNorm::new(store, &format!("{prefix}.ln_context"), h),
            // Bias-free so that all-zero values yield an all-zero attention output.
            cross_attn: MultiHeadAttention::new(store, &format!("{prefix}.cross_attn"), h, cfg.num_heads, false, rng),
            self_attn: (cfg.variant == DecoderVariant::Fuse)
                .then(|| MultiHeadAttention::new(store, &format!("{prefix}.self_attn"), h, cfg.num_heads, false, rng)),
            blocks: blocks(store, &format!("{prefix}.blocks"), cfg.depth, h, cfg.num_heads, rng),
            ln_out: LayerNorm::new(store, &format!("{prefix}.ln_out"), h),
            variant: cfg.variant,
            norm_queries_only: cfg.norm_queries_only,
        })
    }

    /// `queries`: `N_q × d_q` states, one output row each.
    /// `context`: `N_c × d_c` states used as keys and values (`N_c ≥ 1`).
    pub fn forward(&self, g: &mut Graph, queries: Var, context: Var) -> Result<DecoderOutput> {
        let n_q = g.value(queries).rows();
        let n_c = g.value(context).rows();
        if n_c == 0 {
            return Err(Error::Shape("decoder context must contain at least one state".into()));
        }
        let q = self.query_proj.forward(g, queries);
        let q = self.ln_query.forward(g, q);
        let kv = self.context_proj.forward(g, context);
        let kv = if self.norm_queries_only { kv } else { self.ln_context.forward(g, kv) };
        let none = AttentionMask::none();
        let (interaction, mut h) = match self.variant {
            DecoderVariant::Cross => {
                let a = self.cross_attn.forward(g, q, kv, kv, &none);
                (a, g.add(q, a))
            }
            DecoderVariant::Fuse => {
                let cross = self.cross_attn.forward(g, q, kv, kv, &none);
                let selfa = self.self_attn.as_ref().expect("fuse variant has self-attention").forward(g, q, q, q, &none);
                let a = g.add(cross, selfa);
                (a, g.add(q, a))
            }
            DecoderVariant::Concat => {
                let joint = g.concat_rows(&[q, kv]);
                let a = self.cross_attn.forward(g, joint, joint, joint, &none);
                let a = g.select_rows(a, &(0..n_q).collect::<Vec<_>>());
                (a, g.add(q, a))
            }
        };
        for block in &self.blocks {
            h = block.forward(g, h, &none);
        }
        let context = self.ln_out.forward(g, h);
        Ok(DecoderOutput { interaction, context })
    }
}

/// Ground-truth pixels of the masked patches, one row per masked index.
#[derive(Clone, Debug, PartialEq)]
pub struct RestorationTarget {
    pixels: Tensor,
}

impl RestorationTarget {
    /// Targets always come from `original` (the color image), whatever the
    /// encoder was shown.
    pub fn from_image(original: &ImageTensor, plan: &MaskPlan, patch: usize) -> Result<Self> {
        let patches = patchify(original, patch)?;
        if patches.rows() != plan.num_patches() {
            return Err(Error::Shape(format!(
                "mask plan covers {} patches, image has {}",
                plan.num_patches(),
                patches.rows()
            )));
        }
        Ok(Self { pixels: patches.select_rows(plan.indices()) })
    }

    pub fn from_tensor(pixels: Tensor) -> Result<Self> {
        if !pixels.is_finite() {
            return Err(Error::Domain("restoration target must be finite".into()));
        }
        Ok(Self { pixels })
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn len(&self) -> usize {
        self.pixels.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.rows() == 0
    }
}

/// Loss value together with its gradient with respect to the input it was
/// computed from.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Tensor,
}

/// Mean over masked patches of the summed squared pixel error. Zero masked
/// patches give a zero loss.
pub fn tir_loss(pred: &Tensor, target: &RestorationTarget) -> Result<LossValue> {
    let truth = target.pixels();
    if pred.shape() != truth.shape() {
        return Err(Error::Shape(format!("prediction {:?} vs target {:?}", pred.shape(), truth.shape())));
    }
    let n = pred.rows();
    if n == 0 {
        return Ok(LossValue { value: 0.0, grad: Tensor::zeros(0, pred.cols()) });
    }
    let inv = 1.0 / n as f64;
    let mut value = 0.0;
    let grad = pred.zip_map(truth, |p, t| 2.0 * (p - t) * inv);
    for i in 0..n {
        value += pred.row(i).iter().zip(truth.row(i)).map(|(p, t)| (p - t) * (p - t)).sum::<f64>();
    }
    Ok(LossValue { value: value * inv, grad })
}

/// Single linear layer from decoder states to patch pixels.
#[derive(Clone, Debug)]
pub struct PixelHead {
    pub linear: Linear,
}

impl PixelHead {
    pub fn new(store: &mut ParamStore, prefix: &str, hidden: usize, patch_dim: usize, rng: &mut impl Rng) -> Self {
        Self { linear: Linear::new(store, &format!("{prefix}.pixel_head"), hidden, patch_dim, true, rng) }
    }

    /// Predictions for the `masked` rows of `context`; `None` when nothing is masked.
    pub fn forward(&self, g: &mut Graph, context: Var, masked: &[usize]) -> Option<Var> {
        if masked.is_empty() {
            return None;
        }
        let rows = g.select_rows(context, masked);
        Some(self.linear.forward(g, rows))
    }
}

/// Restoration branch: decoder plus pixel head.
#[derive(Clone, Debug)]
pub struct TirModule {
    pub decoder: CrossModalDecoder,
    pub head: PixelHead,
}

impl TirModule {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &DecoderConfig,
        embed_dim: usize,
        patch_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let decoder = CrossModalDecoder::new(store, &format!("{prefix}.decoder"), cfg, embed_dim, embed_dim, rng)?;
        let head = PixelHead::new(store, prefix, cfg.hidden_dim, patch_dim, rng);
        Ok(Self { decoder, head })
    }

    /// `patch_states`: masked-image encoder rows for the patches only (no CLS),
    /// `text_states`: the real (non-padding) text token rows.
    pub fn loss(
        &self,
        g: &mut Graph,
        patch_states: Var,
        text_states: Var,
        plan: &MaskPlan,
        target: &RestorationTarget,
    ) -> Result<Option<Var>> {
        if plan.len() != target.len() {
            return Err(Error::Shape(format!("{} masked patches but {} target rows", plan.len(), target.len())));
        }
        let out = self.decoder.forward(g, patch_states, text_states)?;
        let Some(pred) = self.head.forward(g, out.context, plan.indices()) else {
            return Ok(None);
        };
        let lv = tir_loss(g.value(pred), target)?;
        Ok(Some(g.objective(pred, lv.value, lv.grad)))
    }
}

pub fn variant_names() -> String {
    DecoderVariant::ALL.iter().map(|v| v.name()).collect::<Vec<_>>().join(", ")
}

//! Patch-based image encoder and token-based text encoder.
//!
//! Both encoders are pre-norm transformers with learned positional
//! embeddings. The image encoder prepends a CLS token to the projected
//! patches and reads its global feature there; the text encoder reads its
//! global feature at the EOS position.

mod image;
mod tokenizer;

pub use image::{patchify, unpatchify, ImageTensor};
pub use tokenizer::{
    split_words, TokenSequence, Tokenizer, WordTokenizer, EOS_ID, MASK_ID, PAD_ID, SOS_ID, UNK_ID,
};

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttentionMask, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{blocks, LayerNorm, Linear, TransformerBlock};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::tir::MaskPlan;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub image_layers: usize,
    pub text_layers: usize,
    pub num_heads: usize,
    pub max_text_len: usize,
    pub vocab_size: usize,
    /// Causal text self-attention, as in CLIP's text tower.
    #[serde(default)]
    pub text_causal: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl EncoderConfig {
    /// Desk-scale configuration: 64×32 images, 8 patches, width 64.
    pub fn toy() -> Self {
        Self {
            image_height: 64,
            image_width: 32,
            patch_size: 16,
            embed_dim: 64,
            image_layers: 2,
            text_layers: 2,
            num_heads: 4,
            max_text_len: 32,
            vocab_size: 512,
            text_causal: false,
        }
    }

    /// ViT-B/16-shaped layout at 384×128 input.
    pub fn clip_b16() -> Self {
        Self {
            image_height: 384,
            image_width: 128,
            patch_size: 16,
            embed_dim: 512,
            image_layers: 12,
            text_layers: 12,
            num_heads: 8,
            max_text_len: 77,
            vocab_size: 49408,
            text_causal: true,
        }
    }

    pub fn num_patches(&self) -> usize {
        (self.image_height * self.image_width) / (self.patch_size * self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || !self.image_height.is_multiple_of(p) || !self.image_width.is_multiple_of(p) {
            return Err(Error::PatchDimension { height: self.image_height, width: self.image_width, patch: p });
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.max_text_len < 2 {
            return Err(Error::Config("max_text_len must be at least 2".into()));
        }
        if self.vocab_size <= MASK_ID as usize {
            return Err(Error::Config("vocab_size must cover the special tokens".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

/// Per-position encoder outputs plus the global feature.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenFeatures {
    pub per_token: Tensor,
    pub global: Vec<f64>,
    pub cls_index: usize,
    pub modality: Modality,
}

impl TokenFeatures {
    fn from_states(per_token: Tensor, cls_index: usize, modality: Modality) -> Self {
        let global = per_token.row(cls_index).to_vec();
        Self { per_token, global, cls_index, modality }
    }
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub patch_proj: Linear,
    pub cls_token: ParamId,
    pub mask_token: ParamId,
    pub position: ParamId,
    pub ln_pre: LayerNorm,
    pub blocks: Vec<TransformerBlock>,
    pub ln_post: LayerNorm,
    patch_size: usize,
    height: usize,
    width: usize,
}

impl ImageEncoder {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let std = 1.0 / libm::sqrt(d as f64);
        Ok(Self {
            patch_proj: Linear::new(store, &format!("{prefix}.patch_proj"), cfg.patch_dim(), d, true, rng),
            cls_token: store.add_normal(format!("{prefix}.cls_token"), 1, d, std, rng),
            mask_token: store.add_normal(format!("{prefix}.mask_token"), 1, d, std, rng),
            position: store.add_normal(format!("{prefix}.position"), cfg.num_patches() + 1, d, 0.02, rng),
            ln_pre: LayerNorm::new(store, &format!("{prefix}.ln_pre"), d),
            blocks: blocks(store, &format!("{prefix}.blocks"), cfg.image_layers, d, cfg.num_heads, rng),
            ln_post: LayerNorm::new(store, &format!("{prefix}.ln_post"), d),
            patch_size: cfg.patch_size,
            height: cfg.image_height,
            width: cfg.image_width,
        })
    }

    pub fn num_patches(&self) -> usize {
        (self.height / self.patch_size) * (self.width / self.patch_size)
    }

    /// Builds the forward pass; the result has `N^v + 1` rows with the CLS
    /// token first. Masked patches have their projected embedding swapped
    /// for the shared MASK embedding before positions are added.
    pub fn forward(&self, g: &mut Graph, image: &ImageTensor, mask: Option<&MaskPlan>) -> Result<Var> {
        if image.height() != self.height || image.width() != self.width {
            return Err(Error::Shape(format!(
                "image is {}x{}, encoder expects {}x{}",
                image.height(),
                image.width(),
                self.height,
                self.width
            )));
        }
        let patches = patchify(image, self.patch_size)?;
        let n = patches.rows();
        let x = g.input(patches);
        let mut emb = self.patch_proj.forward(g, x);
        if let Some(plan) = mask {
            if plan.num_patches() != n {
                return Err(Error::Shape(format!("mask plan covers {} patches, image has {n}", plan.num_patches())));
            }
            if let Some(&bad) = plan.indices().iter().find(|&&i| i >= n) {
                return Err(Error::OutOfRange { what: "patches", index: bad, bound: n });
            }
            let fill = g.param(self.mask_token);
            emb = g.replace_rows(emb, fill, plan.indices());
        }
        let cls = g.param(self.cls_token);
        let tokens = g.concat_rows(&[cls, emb]);
        let pos = g.param(self.position);
        let mut h = g.add(tokens, pos);
        h = self.ln_pre.forward(g, h);
        let none = AttentionMask::none();
        for block in &self.blocks {
            h = block.forward(g, h, &none);
        }
        Ok(self.ln_post.forward(g, h))
    }

    pub fn encode(&self, store: &ParamStore, image: &ImageTensor, mask: Option<&MaskPlan>) -> Result<TokenFeatures> {
        let mut g = Graph::new(store);
        let out = self.forward(&mut g, image, mask)?;
        Ok(TokenFeatures::from_states(g.value(out).clone(), 0, Modality::Image))
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub token_embedding: ParamId,
    pub position: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub ln_final: LayerNorm,
    pub causal: bool,
    max_len: usize,
    vocab_size: usize,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        Ok(Self {
            token_embedding: store.add_normal(format!("{prefix}.token_embedding"), cfg.vocab_size, d, 0.5, rng),
            position: store.add_normal(format!("{prefix}.position"), cfg.max_text_len, d, 0.02, rng),
            blocks: blocks(store, &format!("{prefix}.blocks"), cfg.text_layers, d, cfg.num_heads, rng),
            ln_final: LayerNorm::new(store, &format!("{prefix}.ln_final"), d),
            causal: cfg.text_causal,
            max_len: cfg.max_text_len,
            vocab_size: cfg.vocab_size,
        })
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    fn check(&self, tokens: &TokenSequence) -> Result<()> {
        if tokens.padded_len() > self.max_len {
            return Err(Error::InvalidTokens(format!(
                "{} positions exceed max_text_len {}",
                tokens.padded_len(),
                self.max_len
            )));
        }
        TokenSequence::new(tokens.ids().to_vec(), tokens.len(), self.vocab_size).map(drop)
    }

    /// Builds the forward pass over `rows` positions: all `max_text_len`
    /// positions when `full`, otherwise only the real tokens. Padding is
    /// masked out as keys, so rows below `tokens.len()` are identical
    /// either way.
    pub fn forward(&self, g: &mut Graph, tokens: &TokenSequence, full: bool) -> Result<Var> {
        self.check(tokens)?;
        let rows = if full { self.max_len } else { tokens.len() };
        let padded = tokens.repadded(rows)?;
        let ids: Vec<usize> = padded.ids().iter().map(|&t| t as usize).collect();
        let table = g.param(self.token_embedding);
        let emb = g.select_rows(table, &ids);
        let pos_table = g.param(self.position);
        let pos = g.select_rows(pos_table, &(0..rows).collect::<Vec<_>>());
        let mut h = g.add(emb, pos);
        let mask = AttentionMask {
            key_valid: (rows > tokens.len()).then(|| padded.valid_mask()),
            causal: self.causal,
        };
        for block in &self.blocks {
            h = block.forward(g, h, &mask);
        }
        Ok(self.ln_final.forward(g, h))
    }

    /// Full `max_text_len × d` output.
    pub fn encode(&self, store: &ParamStore, tokens: &TokenSequence) -> Result<TokenFeatures> {
        let mut g = Graph::new(store);
        let out = self.forward(&mut g, tokens, true)?;
        Ok(TokenFeatures::from_states(g.value(out).clone(), tokens.cls_index(), Modality::Text))
    }
}

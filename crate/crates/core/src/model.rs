//! The full training model: dual encoders plus the auxiliary heads, and
//! the per-batch objective.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::augmentation::{pos_prune, standard_augs, to_grayscale, PosTagger};
use crate::autograd::{Gradients, Graph, Var};
use crate::config::ExperimentConfig;
use crate::data::{Batch, Dataset};
use crate::encoders::{ImageEncoder, ImageTensor, TextEncoder, TokenSequence, Tokenizer};
use crate::error::{Error, Result};
use crate::losses::{
    cmt_loss, cosine_sim_graph, cross_entropy, id_loss_graph, sdm_loss, BatchLabels, LossComponents, SimilarityMatrix,
};
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore};
use crate::rng::substream;
use crate::tensor::Tensor;
use crate::tir::{sample_mask, CrossModalDecoder, MaskPlan, RestorationTarget, TirModule};

/// Masked-token recovery: text queries attend to clean image states and
/// predict the original ids of the masked tokens.
#[derive(Clone, Debug)]
pub struct IrrModule {
    pub decoder: CrossModalDecoder,
    pub head: Linear,
}

impl IrrModule {
    pub fn loss(&self, g: &mut Graph, text_states: Var, image_states: Var, input: &IrrInput) -> Result<Option<Var>> {
        if input.positions.is_empty() {
            return Ok(None);
        }
        let out = self.decoder.forward(g, text_states, image_states)?;
        let rows = g.select_rows(out.context, &input.positions);
        let logits = self.head.forward(g, rows);
        let classes: Vec<usize> = input.targets.iter().map(|&t| t as usize).collect();
        let ce = cross_entropy(g.value(logits), &classes)?;
        Ok(Some(g.objective(logits, ce.value, ce.grad)))
    }
}

pub struct SenModel {
    pub store: ParamStore,
    pub image: ImageEncoder,
    pub text: TextEncoder,
    pub tir: Option<TirModule>,
    pub irr: Option<IrrModule>,
    /// `C × d` identity classifier.
    pub classifier: Option<ParamId>,
    pub num_classes: usize,
}

/// Prefixes of parameters trained at the module learning rate.
pub const MODULE_PREFIXES: [&str; 3] = ["tir.", "irr.", "id."];

impl SenModel {
    /// Each part draws its initialization from its own stream, so switching
    /// auxiliary heads on or off leaves encoder weights unchanged.
    pub fn new(cfg: &ExperimentConfig, num_classes: usize) -> Result<Self> {
        cfg.validate()?;
        let e = &cfg.encoder;
        let d = e.embed_dim;
        let mut store = ParamStore::new();
        let image = ImageEncoder::new(&mut store, "image", e, &mut substream(cfg.seed, 1))?;
        let text = TextEncoder::new(&mut store, "text", e, &mut substream(cfg.seed, 2))?;
        let tir = if cfg.components.tir {
            Some(TirModule::new(&mut store, "tir", &cfg.decoder, d, e.patch_dim(), &mut substream(cfg.seed, 3))?)
        } else {
            None
        };
        let irr = if cfg.components.irr {
            let rng = &mut substream(cfg.seed, 4);
            let decoder = CrossModalDecoder::new(&mut store, "irr.decoder", &cfg.decoder, d, d, rng)?;
            let head = Linear::new(&mut store, "irr.head", cfg.decoder.hidden_dim, e.vocab_size, true, rng);
            Some(IrrModule { decoder, head })
        } else {
            None
        };
        let classifier = if cfg.components.id {
            if num_classes == 0 {
                return Err(Error::Config("identity loss needs at least one class".into()));
            }
            let std = 1.0 / libm::sqrt(d as f64);
            Some(store.add_normal("id.classifier", num_classes, d, std, &mut substream(cfg.seed, 5)))
        } else {
            None
        };
        Ok(Self { store, image, text, tir, irr, classifier, num_classes })
    }

    /// Global image feature (the CLS row) of a clean image.
    pub fn image_feature(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        Ok(self.image.encode(&self.store, image, None)?.global)
    }

    pub fn text_feature(&self, tokens: &TokenSequence) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.store);
        let out = self.text.forward(&mut g, tokens, false)?;
        Ok(g.value(out).row(tokens.cls_index()).to_vec())
    }

    /// Objective and parameter gradients for one prepared batch.
    pub fn loss_and_grads(&self, cfg: &ExperimentConfig, batch: &PreparedBatch) -> Result<(LossComponents, f64, Gradients)> {
        let mut g = Graph::new(&self.store);
        let (total, components) = self.objective(&mut g, cfg, batch)?;
        let value = g.value(total).item();
        Ok((components, value, g.backward(total)))
    }

    pub fn objective(&self, g: &mut Graph, cfg: &ExperimentConfig, batch: &PreparedBatch) -> Result<(Var, LossComponents)> {
        let b = batch.samples.len();
        if b == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        let flags = &cfg.components;
        let mut img_global = Vec::with_capacity(b);
        let mut txt_global = Vec::with_capacity(b);
        let mut terms: Vec<Var> = Vec::new();
        let mut comps = LossComponents::default();
        let mut tir_terms = Vec::new();
        let mut irr_terms = Vec::new();

        for s in &batch.samples {
            let img = self.image.forward(g, &s.image, None)?;
            img_global.push(g.select_rows(img, &[0]));
            let txt = self.text.forward(g, &s.tokens, false)?;
            txt_global.push(g.select_rows(txt, &[s.tokens.cls_index()]));

            if let (Some(tir), Some(input)) = (&self.tir, &s.tir) {
                let masked = self.image.forward(g, &input.masked_input, Some(&input.plan))?;
                let n = g.value(masked).rows();
                let patches = g.select_rows(masked, &(1..n).collect::<Vec<_>>());
                if let Some(l) = tir.loss(g, patches, txt, &input.plan, &input.target)? {
                    tir_terms.push(l);
                }
            }
            if let (Some(irr), Some(input)) = (&self.irr, &s.irr) {
                let masked_txt = self.text.forward(g, &input.tokens, false)?;
                if let Some(l) = irr.loss(g, masked_txt, img, input)? {
                    irr_terms.push(l);
                }
            }
        }

        let mean_of = |g: &mut Graph, vs: &[Var]| -> Option<Var> {
            let (&first, rest) = vs.split_first()?;
            let sum = rest.iter().fold(first, |acc, &v| g.add(acc, v));
            Some(g.scale(sum, 1.0 / batch.samples.len() as f64))
        };
        if flags.tir {
            let v = mean_of(g, &tir_terms);
            comps.tir = Some(v.map_or(0.0, |v| g.value(v).item()));
            terms.extend(v.map(|v| g.scale(v, cfg.loss.tir_weight)));
        }
        if flags.irr {
            let v = mean_of(g, &irr_terms);
            comps.irr = Some(v.map_or(0.0, |v| g.value(v).item()));
            terms.extend(v);
        }

        let images = g.concat_rows(&img_global);
        let texts = g.concat_rows(&txt_global);
        let labels = BatchLabels::new(batch.labels.clone());
        if flags.cmt || flags.sdm {
            let sim_var = cosine_sim_graph(g, images, texts);
            let sim = SimilarityMatrix::new(g.value(sim_var).clone())?;
            if flags.cmt {
                let out = cmt_loss(&sim, &labels, cfg.loss.margin)?;
                comps.cmt = Some(out.loss.value);
                terms.push(g.objective(sim_var, out.loss.value, out.loss.grad));
            }
            if flags.sdm {
                let lv = sdm_loss(&sim, &labels, cfg.loss.temperature, cfg.loss.sdm_epsilon)?;
                comps.sdm = Some(lv.value);
                terms.push(g.objective(sim_var, lv.value, lv.grad));
            }
        }
        if let (true, Some(w)) = (flags.id, self.classifier) {
            let w = g.param(w);
            let l = id_loss_graph(g, images, texts, w, &batch.labels)?;
            comps.id = Some(g.value(l).item());
            terms.push(l);
        }
        let (&first, rest) = terms.split_first().ok_or_else(|| Error::Config("no loss component enabled".into()))?;
        let total = rest.iter().fold(first, |acc, &v| g.add(acc, v));
        Ok((total, comps))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TirInput {
    /// What the masked encoder sees (grayscale when enabled).
    pub masked_input: ImageTensor,
    pub plan: MaskPlan,
    /// Color pixels of the masked patches.
    pub target: RestorationTarget,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IrrInput {
    pub tokens: TokenSequence,
    pub positions: Vec<usize>,
    pub targets: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    pub image: ImageTensor,
    pub caption: alloc::string::String,
    pub tokens: TokenSequence,
    pub tir: Option<TirInput>,
    pub irr: Option<IrrInput>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedBatch {
    pub samples: Vec<PreparedSample>,
    pub labels: Vec<usize>,
    pub image_ids: Vec<u64>,
}

/// Picks each content token (between SOS and EOS) with probability `p`,
/// and at least one when there is any content.
pub fn sample_token_mask(tokens: &TokenSequence, p: f64, rng: &mut impl Rng) -> Vec<usize> {
    let content = 1..tokens.len() - 1;
    if content.is_empty() || p <= 0.0 {
        return Vec::new();
    }
    let mut picked: Vec<usize> = content.clone().filter(|_| rng.random::<f64>() < p).collect();
    if picked.is_empty() {
        picked.push(rng.random_range(content));
    }
    picked
}

/// Applies augmentation and masking to a sampled batch.
pub fn prepare_batch(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    batch: &Batch,
    tokenizer: &dyn Tokenizer,
    tagger: &dyn PosTagger,
    rng: &mut impl Rng,
) -> Result<PreparedBatch> {
    let e = &cfg.encoder;
    let mut samples = Vec::with_capacity(batch.pairs.len());
    for &pair in &batch.pairs {
        let src = &dataset.samples[pair.sample];
        if src.image.height() != e.image_height || src.image.width() != e.image_width {
            return Err(Error::Shape(format!(
                "image {} is {}x{}, config expects {}x{}",
                src.image_id,
                src.image.height(),
                src.image.width(),
                e.image_height,
                e.image_width
            )));
        }
        let image = standard_augs(&src.image, &cfg.aug, rng);
        let caption = pos_prune(dataset.caption(pair), &cfg.aug, tagger, rng);
        let tokens = tokenizer.encode(&caption, e.max_text_len);
        let tir = if cfg.components.tir {
            let plan = sample_mask(e.num_patches(), cfg.mask_ratio, rng)?;
            let target = RestorationTarget::from_image(&image, &plan, e.patch_size)?;
            let masked_input = if cfg.aug.grayscale_for_tir { to_grayscale(&image) } else { image.clone() };
            Some(TirInput { masked_input, plan, target })
        } else {
            None
        };
        let irr = if cfg.components.irr {
            let positions = sample_token_mask(&tokens, cfg.irr_mask_prob, rng);
            let targets = positions.iter().map(|&p| tokens.ids()[p]).collect();
            Some(IrrInput { tokens: tokens.with_masked(&positions), positions, targets })
        } else {
            None
        };
        samples.push(PreparedSample { image, caption, tokens, tir, irr });
    }
    Ok(PreparedBatch {
        samples,
        labels: batch.labels.clone(),
        image_ids: batch.pairs.iter().map(|p| dataset.samples[p.sample].image_id).collect(),
    })
}

/// Global features of every gallery image and every caption query.
pub struct EncodedSplit {
    pub image_ids: Vec<u64>,
    pub image_labels: Vec<usize>,
    pub image_features: Tensor,
    pub query_labels: Vec<usize>,
    pub query_features: Tensor,
}

pub fn encode_split(model: &SenModel, dataset: &Dataset, tokenizer: &dyn Tokenizer, max_len: usize) -> Result<EncodedSplit> {
    if dataset.is_empty() {
        return Err(Error::Degenerate("split is empty".into()));
    }
    let mut img = Vec::new();
    for s in &dataset.samples {
        img.push(model.image_feature(&s.image)?);
    }
    let mut txt = Vec::new();
    let mut query_labels = Vec::new();
    for p in dataset.pairs() {
        txt.push(model.text_feature(&tokenizer.encode(dataset.caption(p), max_len))?);
        query_labels.push(dataset.label(p));
    }
    Ok(EncodedSplit {
        image_ids: dataset.samples.iter().map(|s| s.image_id).collect(),
        image_labels: dataset.samples.iter().map(|s| s.label).collect(),
        image_features: Tensor::from_rows(&img),
        query_labels,
        query_features: Tensor::from_rows(&txt),
    })
}

//! Training objectives over a batch of global image and text features.
//!
//! Each loss is computed in closed form from a similarity (or logit)
//! matrix and returns its gradient with respect to that matrix, so it can
//! be attached to a [`Graph`] as an objective node.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{dot, log_softmax, norm, softmax_in_place, Tensor};

pub use crate::tir::LossValue;

/// Identity per sample; `matches(i, j)` induces the binary match matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchLabels {
    ids: Vec<usize>,
}

impl BatchLabels {
    pub fn new(ids: Vec<usize>) -> Self {
        Self { ids }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    #[inline]
    pub fn matches(&self, i: usize, j: usize) -> bool {
        self.ids[i] == self.ids[j]
    }

    pub fn match_matrix(&self) -> Tensor {
        let b = self.ids.len();
        let mut y = Tensor::zeros(b, b);
        for i in 0..b {
            for j in 0..b {
                if self.matches(i, j) {
                    y.set(i, j, 1.0);
                }
            }
        }
        y
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub temperature: f64,
    pub margin: f64,
    /// Smoothing added to the target distribution inside the SDM log.
    pub sdm_epsilon: f64,
    /// Multiplier on the restoration loss in the total objective.
    #[serde(default = "yes_f64")]
    pub tir_weight: f64,
}

fn yes_f64() -> f64 {
    1.0
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { temperature: 0.02, margin: 0.2, sdm_epsilon: 1e-8, tir_weight: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        check_temperature(self.temperature)?;
        if !(self.margin >= 0.0) {
            return Err(Error::Config(format!("margin {} must be non-negative", self.margin)));
        }
        if !(0.0..1.0).contains(&self.sdm_epsilon) {
            return Err(Error::Config(format!("sdm_epsilon {} outside [0, 1)", self.sdm_epsilon)));
        }
        if !(self.tir_weight >= 0.0 && self.tir_weight.is_finite()) {
            return Err(Error::Config(format!("tir_weight {} must be non-negative", self.tir_weight)));
        }
        Ok(())
    }
}

fn check_temperature(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("temperature {tau} must be positive")))
    }
}

/// Cosine similarities, rows indexed by images (or queries).
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix(Tensor);

impl SimilarityMatrix {
    pub fn new(values: Tensor) -> Result<Self> {
        if let Some(bad) = values.data().iter().find(|v| !(**v >= -1.0 - 1e-6 && **v <= 1.0 + 1e-6)) {
            return Err(Error::Domain(format!("similarity {bad} outside [-1, 1]")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &Tensor {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.get(i, j)
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn cols(&self) -> usize {
        self.0.cols()
    }
}

/// `sim[i][j] = cos(image_i, text_j)`.
pub fn cosine_sim_matrix(images: &Tensor, texts: &Tensor) -> Result<SimilarityMatrix> {
    if images.cols() != texts.cols() {
        return Err(Error::Shape(format!("feature widths {} and {}", images.cols(), texts.cols())));
    }
    let normalize = |t: &Tensor, what: &str| -> Result<Tensor> {
        let mut out = t.clone();
        for r in 0..t.rows() {
            let n = norm(t.row(r));
            if n == 0.0 || !n.is_finite() {
                return Err(Error::Degenerate(format!("{what} row {r} has zero norm")));
            }
            out.row_mut(r).iter_mut().for_each(|x| *x /= n);
        }
        Ok(out)
    };
    let a = normalize(images, "image feature")?;
    let b = normalize(texts, "text feature")?;
    let mut s = a.matmul_nt(&b);
    s.data_mut().iter_mut().for_each(|x| *x = x.clamp(-1.0, 1.0));
    SimilarityMatrix::new(s)
}

/// Graph version of [`cosine_sim_matrix`] for backpropagation into features.
pub fn cosine_sim_graph(g: &mut Graph, images: Var, texts: Var) -> Var {
    let a = g.normalize_rows(images);
    let b = g.normalize_rows(texts);
    g.matmul_nt(a, b)
}

/// Softmax of `sim_row / τ`.
pub fn match_probability(sim_row: &[f64], temperature: f64) -> Result<Vec<f64>> {
    check_temperature(temperature)?;
    let mut p: Vec<f64> = sim_row.iter().map(|s| s / temperature).collect();
    softmax_in_place(&mut p);
    Ok(p)
}

/// For one anchor row: the positive with the lowest similarity and the
/// negative with the highest. Ties go to the lower index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MinedPair {
    pub anchor: usize,
    pub positive: usize,
    pub negative: Option<usize>,
}

/// Mines every row of `sim` against the column labels given by `labels`.
pub fn mine_hard_pairs(sim: &Tensor, labels: &BatchLabels) -> Vec<MinedPair> {
    let b = sim.rows();
    (0..b)
        .map(|i| {
            let row = sim.row(i);
            let mut positive: Option<usize> = None;
            let mut negative: Option<usize> = None;
            for (j, &s) in row.iter().enumerate() {
                if labels.matches(i, j) {
                    if positive.is_none_or(|p| s < row[p]) {
                        positive = Some(j);
                    }
                } else if negative.is_none_or(|n| s > row[n]) {
                    negative = Some(j);
                }
            }
            // y_ii = 1, so every anchor has a positive.
            MinedPair { anchor: i, positive: positive.unwrap_or(i), negative }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CmtOutput {
    pub loss: LossValue,
    /// Anchors (over both directions) that had no in-batch negative.
    pub anchors_without_negative: usize,
    pub image_to_text: Vec<MinedPair>,
    pub text_to_image: Vec<MinedPair>,
}

/// Bidirectional hard-sample triplet loss on cosine similarities:
/// `mean_i [s(i, n_i) − s(i, p_i) + α]₊` for images→texts plus the same over
/// the transposed matrix. Anchors without a negative contribute zero.
pub fn cmt_loss(sim: &SimilarityMatrix, labels: &BatchLabels, margin: f64) -> Result<CmtOutput> {
    let s = sim.values();
    let b = s.rows();
    if s.cols() != b || labels.len() != b {
        return Err(Error::Shape(format!("{}x{} similarities for {} labels", b, s.cols(), labels.len())));
    }
    if b == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    let inv = 1.0 / b as f64;
    let mut grad = Tensor::zeros(b, b);
    let mut value = 0.0;
    let mut missing = 0;

    let i2t = mine_hard_pairs(s, labels);
    for m in &i2t {
        let Some(n) = m.negative else {
            missing += 1;
            continue;
        };
        let h = s.get(m.anchor, n) - s.get(m.anchor, m.positive) + margin;
        if h > 0.0 {
            value += h * inv;
            grad.data_mut()[m.anchor * b + n] += inv;
            grad.data_mut()[m.anchor * b + m.positive] -= inv;
        }
    }
    let st = s.transpose();
    let t2i = mine_hard_pairs(&st, labels);
    for m in &t2i {
        let Some(n) = m.negative else {
            missing += 1;
            continue;
        };
        let h = st.get(m.anchor, n) - st.get(m.anchor, m.positive) + margin;
        if h > 0.0 {
            value += h * inv;
            // st[a][x] is s[x][a].
            grad.data_mut()[n * b + m.anchor] += inv;
            grad.data_mut()[m.positive * b + m.anchor] -= inv;
        }
    }
    if missing > 0 {
        log::warn!("cmt loss: {missing} anchors had no in-batch negative");
    }
    Ok(CmtOutput { loss: LossValue { value, grad }, anchors_without_negative: missing, image_to_text: i2t, text_to_image: t2i })
}

/// Similarity-distribution matching:
/// `(1/B) Σ_i Σ_j p_ij log(p_ij / (q_ij + ε))` with `p = softmax(sim/τ)` per
/// row and `q` the row-normalized match matrix, summed over both retrieval
/// directions. `q + ε` is floored at the smallest positive `f64`.
pub fn sdm_loss(sim: &SimilarityMatrix, labels: &BatchLabels, temperature: f64, epsilon: f64) -> Result<LossValue> {
    check_temperature(temperature)?;
    let s = sim.values();
    let b = s.rows();
    if s.cols() != b || labels.len() != b {
        return Err(Error::Shape(format!("{}x{} similarities for {} labels", b, s.cols(), labels.len())));
    }
    if b == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    let target: Vec<Vec<f64>> = (0..b)
        .map(|i| {
            let count = (0..b).filter(|&j| labels.matches(i, j)).count() as f64;
            (0..b).map(|j| if labels.matches(i, j) { 1.0 / count } else { 0.0 }).collect()
        })
        .collect();
    let inv_b = 1.0 / b as f64;
    let mut value = 0.0;
    let mut grad = Tensor::zeros(b, b);
    let mut one_direction = |rows: &Tensor, transposed: bool| {
        for i in 0..b {
            let logits: Vec<f64> = rows.row(i).iter().map(|x| x / temperature).collect();
            let logp = log_softmax(&logits);
            let mut row_loss = 0.0;
            let mut p = vec![0.0; b];
            let mut a = vec![0.0; b];
            for j in 0..b {
                p[j] = libm::exp(logp[j]);
                // Floor keeps ε = 0 finite when the target puts no mass on j.
                a[j] = logp[j] - libm::log((target[i][j] + epsilon).max(f64::MIN_POSITIVE));
                if p[j] > 0.0 {
                    row_loss += p[j] * a[j];
                }
            }
            value += row_loss * inv_b;
            for j in 0..b {
                let d = if p[j] > 0.0 { p[j] * (a[j] - row_loss) } else { 0.0 };
                let d = d * inv_b / temperature;
                if transposed {
                    grad.data_mut()[j * b + i] += d;
                } else {
                    grad.data_mut()[i * b + j] += d;
                }
            }
        }
    };
    one_direction(s, false);
    one_direction(&s.transpose(), true);
    Ok(LossValue { value, grad })
}

/// Mean softmax cross-entropy of `logits` rows against class indices.
pub fn cross_entropy(logits: &Tensor, classes: &[usize]) -> Result<LossValue> {
    let (n, c) = logits.shape();
    if classes.len() != n {
        return Err(Error::Shape(format!("{n} logit rows for {} targets", classes.len())));
    }
    if n == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    if let Some(&bad) = classes.iter().find(|&&k| k >= c) {
        return Err(Error::OutOfRange { what: "identity classes", index: bad, bound: c });
    }
    let inv = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grad = Tensor::zeros(n, c);
    for (i, &k) in classes.iter().enumerate() {
        let lp = log_softmax(logits.row(i));
        value -= lp[k] * inv;
        for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
            *g = (libm::exp(lp[j]) - if j == k { 1.0 } else { 0.0 }) * inv;
        }
    }
    Ok(LossValue { value, grad })
}

/// Identity classification through a shared bias-free head: the mean of
/// the image-side and text-side cross-entropies of `features · Wᵀ`.
pub fn id_loss_graph(g: &mut Graph, images: Var, texts: Var, classifier: Var, classes: &[usize]) -> Result<Var> {
    let li = g.matmul_nt(images, classifier);
    let lt = g.matmul_nt(texts, classifier);
    let ci = cross_entropy(g.value(li), classes)?;
    let ct = cross_entropy(g.value(lt), classes)?;
    let oi = g.objective(li, ci.value, ci.grad);
    let ot = g.objective(lt, ct.value, ct.grad);
    let sum = g.add(oi, ot);
    Ok(g.scale(sum, 0.5))
}

/// Value of [`id_loss_graph`] for plain matrices; `classifier` is `C × d`.
pub fn id_loss(images: &Tensor, texts: &Tensor, classes: &[usize], classifier: &Tensor) -> Result<f64> {
    if images.cols() != classifier.cols() || texts.cols() != classifier.cols() {
        return Err(Error::Shape("feature width does not match classifier".into()));
    }
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let (i, t, w) = (g.input(images.clone()), g.input(texts.clone()), g.input(classifier.clone()));
    let out = id_loss_graph(&mut g, i, t, w, classes)?;
    Ok(g.value(out).item())
}

/// Which terms of the objective are active. SDM and ID form the baseline;
/// `irr` is masked-token recovery from image context.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentFlags {
    pub tir: bool,
    pub cmt: bool,
    #[serde(default)]
    pub irr: bool,
    #[serde(default = "yes")]
    pub sdm: bool,
    #[serde(default = "yes")]
    pub id: bool,
}

fn yes() -> bool {
    true
}

impl Default for ComponentFlags {
    fn default() -> Self {
        Self { tir: true, cmt: true, irr: false, sdm: true, id: true }
    }
}

impl ComponentFlags {
    pub fn baseline() -> Self {
        Self { tir: false, cmt: false, irr: false, sdm: true, id: true }
    }
}

/// Per-component values for one batch; `None` marks a disabled term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub tir: Option<f64>,
    pub cmt: Option<f64>,
    pub sdm: Option<f64>,
    pub id: Option<f64>,
    pub irr: Option<f64>,
}

/// Sum of the enabled components, with the restoration term scaled by
/// `tir_weight`.
pub fn total_loss(components: &LossComponents, flags: &ComponentFlags, tir_weight: f64) -> f64 {
    let pick = |on: bool, v: Option<f64>| if on { v.unwrap_or(0.0) } else { 0.0 };
    tir_weight * pick(flags.tir, components.tir)
        + pick(flags.cmt, components.cmt)
        + pick(flags.sdm, components.sdm)
        + pick(flags.id, components.id)
        + pick(flags.irr, components.irr)
}

/// Plain-value cosine of two rows.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng;

    fn random(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn sim_of(rows: &[Vec<f64>]) -> SimilarityMatrix {
        SimilarityMatrix::new(Tensor::from_rows(rows)).unwrap()
    }

    #[test]
    fn orthonormal_features_give_identity() {
        let mut f = Tensor::zeros(3, 5);
        for i in 0..3 {
            f.set(i, i + 1, 1.0);
        }
        let s = cosine_sim_matrix(&f, &f).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(s.get(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn cosine_scale_invariance_and_oracle() {
        let mut rng = seeded(1);
        let a = random(&mut rng, 4, 8);
        let b = random(&mut rng, 4, 8);
        let s = cosine_sim_matrix(&a, &b).unwrap();
        let mut a5 = a.clone();
        a5.row_mut(2).iter_mut().for_each(|x| *x *= 5.0);
        assert!(cosine_sim_matrix(&a5, &b).unwrap().values().max_abs_diff(s.values()) < 1e-6);
        for i in 0..4 {
            for j in 0..4 {
                let (x, y) = (a.row(i), b.row(j));
                let mut d = 0.0;
                let (mut nx, mut ny) = (0.0, 0.0);
                for k in 0..8 {
                    d += x[k] * y[k];
                    nx += x[k] * x[k];
                    ny += y[k] * y[k];
                }
                assert!((s.get(i, j) - d / (libm::sqrt(nx) * libm::sqrt(ny))).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_norm_row_is_degenerate() {
        let a = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        assert!(matches!(cosine_sim_matrix(&a, &a), Err(Error::Degenerate(_))));
    }

    #[test]
    fn match_probability_cases() {
        assert_eq!(match_probability(&[0.3], 0.02).unwrap(), vec![1.0]);
        let p = match_probability(&[0.4; 5], 0.02).unwrap();
        assert!(p.iter().all(|x| (x - 0.2).abs() < 1e-12));
        let row = [0.1, -0.3, 0.7, 0.2];
        let shifted: Vec<f64> = row.iter().map(|x| x + 0.37).collect();
        let (a, b) = (match_probability(&row, 0.02).unwrap(), match_probability(&shifted, 0.02).unwrap());
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-6));
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(matches!(match_probability(&row, 0.0), Err(Error::Domain(_))));
        assert!(matches!(match_probability(&row, -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn cmt_hinge_arithmetic() {
        // Anchor 0: positive {0}, negative {1}.
        let labels = BatchLabels::new(vec![0, 1]);
        let s = sim_of(&[vec![0.9, 0.3], vec![0.3, 0.9]]);
        assert_eq!(cmt_loss(&s, &labels, 0.2).unwrap().loss.value, 0.0);

        let s = sim_of(&[vec![0.5, 0.6], vec![0.6, 0.5]]);
        // Every anchor in both directions contributes 0.3, averaged over B=2, two directions.
        let v = cmt_loss(&s, &labels, 0.2).unwrap().loss.value;
        assert!((v - 0.6).abs() < 1e-12, "{v}");
    }

    #[test]
    fn cmt_single_anchor_term() {
        // One active anchor: row 0 has sim(pos)=0.5, sim(neg)=0.6; all others satisfied.
        let labels = BatchLabels::new(vec![0, 1, 2]);
        let s = sim_of(&[vec![0.5, 0.6, -0.9], vec![-0.9, 0.95, -0.9], vec![-0.9, -0.9, 0.95]]);
        let out = cmt_loss(&s, &labels, 0.2).unwrap();
        // i2t: anchor 0 term 0.3; t2i: text 1 sees image 0 at 0.6 vs its own 0.95 -> 0.6-0.95+0.2 < 0.
        assert!((out.loss.value - 0.3 / 3.0).abs() < 1e-12);
        assert_eq!(out.image_to_text[0], MinedPair { anchor: 0, positive: 0, negative: Some(1) });
    }

    #[test]
    fn cmt_all_same_identity_contributes_zero() {
        let labels = BatchLabels::new(vec![4, 4, 4]);
        let s = sim_of(&[vec![0.1, 0.2, 0.3], vec![0.2, 0.1, 0.3], vec![0.3, 0.2, 0.1]]);
        let out = cmt_loss(&s, &labels, 0.2).unwrap();
        assert_eq!(out.loss.value, 0.0);
        assert_eq!(out.anchors_without_negative, 6);
    }

    /// Exhaustive scalar oracle over explicit positive/negative lists.
    fn cmt_oracle(s: &Tensor, ids: &[usize], margin: f64) -> f64 {
        let b = ids.len();
        let mut total = 0.0;
        for transposed in [false, true] {
            for a in 0..b {
                let at = |j: usize| if transposed { s.get(j, a) } else { s.get(a, j) };
                let pos: Vec<f64> = (0..b).filter(|&j| ids[j] == ids[a]).map(at).collect();
                let neg: Vec<f64> = (0..b).filter(|&j| ids[j] != ids[a]).map(at).collect();
                if neg.is_empty() {
                    continue;
                }
                let weakest = pos.iter().copied().fold(f64::INFINITY, f64::min);
                let hardest = neg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                total += (hardest - weakest + margin).max(0.0) / b as f64;
            }
        }
        total
    }

    #[test]
    fn cmt_matches_exhaustive_oracle() {
        let mut rng = seeded(5);
        for _ in 0..20 {
            let ids = vec![0, 1, 2, 0, 1, 2];
            let feats = (random(&mut rng, 6, 8), random(&mut rng, 6, 8));
            let s = cosine_sim_matrix(&feats.0, &feats.1).unwrap();
            let got = cmt_loss(&s, &BatchLabels::new(ids.clone()), 0.2).unwrap().loss.value;
            assert!((got - cmt_oracle(s.values(), &ids, 0.2)).abs() < 1e-10);
        }
    }

    #[test]
    fn sdm_degenerate_and_saturated() {
        let one = sim_of(&[vec![0.7]]);
        assert_eq!(sdm_loss(&one, &BatchLabels::new(vec![0]), 0.02, 0.0).unwrap().value, 0.0);
        let s = sim_of(&[vec![1.0, -1.0], vec![-1.0, 1.0]]);
        let v = sdm_loss(&s, &BatchLabels::new(vec![0, 1]), 0.02, 0.0).unwrap().value;
        assert!(v.abs() < 1e-6, "{v}");
        assert!(matches!(sdm_loss(&s, &BatchLabels::new(vec![0, 1]), 0.0, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn sdm_matches_scalar_kl_oracle() {
        let mut rng = seeded(6);
        let ids = vec![0, 1, 1, 2, 0];
        let s = cosine_sim_matrix(&random(&mut rng, 5, 8), &random(&mut rng, 5, 8)).unwrap();
        let (tau, eps) = (0.1, 1e-8);
        let mut oracle = 0.0;
        for transposed in [false, true] {
            for i in 0..5 {
                let at = |j: usize| if transposed { s.get(j, i) } else { s.get(i, j) };
                let z: f64 = (0..5).map(|k| libm::exp(at(k) / tau)).sum();
                let npos = ids.iter().filter(|&&x| x == ids[i]).count() as f64;
                for j in 0..5 {
                    let p = libm::exp(at(j) / tau) / z;
                    let q = if ids[i] == ids[j] { 1.0 / npos } else { 0.0 };
                    oracle += p * libm::log(p / (q + eps)) / 5.0;
                }
            }
        }
        let got = sdm_loss(&s, &BatchLabels::new(ids), tau, eps).unwrap().value;
        assert!((got - oracle).abs() < 1e-8, "{got} vs {oracle}");
    }

    #[test]
    fn id_loss_closed_forms() {
        // Uniform logits: zero classifier.
        let f = Tensor::filled(3, 4, 0.5);
        let w = Tensor::zeros(5, 4);
        let v = id_loss(&f, &f, &[0, 3, 4], &w).unwrap();
        assert!((v - libm::log(5.0)).abs() < 1e-12);
        // One-hot logits with gap 20.
        let mut feats = Tensor::zeros(2, 3);
        feats.set(0, 0, 1.0);
        feats.set(1, 2, 1.0);
        let mut w = Tensor::zeros(3, 3);
        for k in 0..3 {
            w.set(k, k, 20.0);
        }
        assert!(id_loss(&feats, &feats, &[0, 2], &w).unwrap() < 1e-6);
        assert!(matches!(id_loss(&feats, &feats, &[0, 7], &w), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn id_loss_matches_scalar_oracle() {
        let mut rng = seeded(7);
        let (fi, ft, w) = (random(&mut rng, 4, 6), random(&mut rng, 4, 6), random(&mut rng, 3, 6));
        let classes = [0, 2, 1, 2];
        let ce = |f: &Tensor| -> f64 {
            let mut total = 0.0;
            for i in 0..4 {
                let logits: Vec<f64> = (0..3).map(|k| (0..6).map(|c| f.get(i, c) * w.get(k, c)).sum()).collect();
                let z: f64 = logits.iter().map(|l| libm::exp(*l)).sum();
                total += -libm::log(libm::exp(logits[classes[i]]) / z);
            }
            total / 4.0
        };
        let oracle = 0.5 * (ce(&fi) + ce(&ft));
        assert!((id_loss(&fi, &ft, &classes, &w).unwrap() - oracle).abs() < 1e-8);
    }

    #[test]
    fn total_loss_flags() {
        let c = LossComponents { tir: Some(1.0), cmt: Some(0.5), sdm: Some(0.25), id: Some(0.25), irr: None };
        assert_eq!(total_loss(&c, &ComponentFlags::default(), 1.0), 2.0);
        assert_eq!(total_loss(&c, &ComponentFlags::baseline(), 1.0), 0.5);
        assert_eq!(total_loss(&LossComponents::default(), &ComponentFlags::default(), 1.0), 0.0);
    }

    #[test]
    fn labels_match_matrix_is_symmetric_with_unit_diagonal() {
        let y = BatchLabels::new(vec![3, 1, 3, 2]).match_matrix();
        assert_eq!(y, y.transpose());
        assert!((0..4).all(|i| y.get(i, i) == 1.0));
    }

    proptest! {
        #[test]
        fn cmt_hinge_floor_and_scale_invariance(seed in any::<u64>(), scale in 0.01f64..100.0) {
            let mut rng = seeded(seed);
            let ids: Vec<usize> = (0..6).map(|_| rng.random_range(0..3)).collect();
            let labels = BatchLabels::new(ids);
            let (a, b) = (random(&mut rng, 6, 5), random(&mut rng, 6, 5));
            let s1 = cosine_sim_matrix(&a, &b).unwrap();
            let s2 = cosine_sim_matrix(&a.scale(scale), &b.scale(scale)).unwrap();
            let l1 = cmt_loss(&s1, &labels, 0.2).unwrap().loss.value;
            let l2 = cmt_loss(&s2, &labels, 0.2).unwrap().loss.value;
            prop_assert!(l1 >= 0.0);
            prop_assert!((l1 - l2).abs() < 1e-6);
            let d1 = sdm_loss(&s1, &labels, 0.02, 1e-8).unwrap().value;
            let d2 = sdm_loss(&s2, &labels, 0.02, 1e-8).unwrap().value;
            prop_assert!((d1 - d2).abs() < 1e-6);
        }

        #[test]
        fn cmt_zero_when_margin_satisfied(seed in any::<u64>()) {
            let mut rng = seeded(seed);
            let ids: Vec<usize> = (0..6).map(|i| i % 3).collect();
            // Positives near 0.9, negatives near -0.5: every anchor satisfied with α = 0.2.
            let mut s = Tensor::zeros(6, 6);
            for i in 0..6 {
                for j in 0..6 {
                    let base = if ids[i] == ids[j] { 0.9 } else { -0.5 };
                    s.set(i, j, base + rng.random_range(-0.05..0.05));
                }
            }
            let v = cmt_loss(&SimilarityMatrix::new(s).unwrap(), &BatchLabels::new(ids), 0.2).unwrap().loss.value;
            prop_assert_eq!(v, 0.0);
        }
    }
}

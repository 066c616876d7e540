//! Gallery ranking and retrieval metrics.
//!
//! Gallery features are normalized once when the gallery is built, so a
//! text query costs one matrix-vector product plus a sort.

use alloc::format;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{norm, Tensor};

/// Precomputed, L2-normalized global image features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gallery {
    ids: Vec<u64>,
    labels: Vec<usize>,
    features: Tensor,
}

impl Gallery {
    pub fn new(ids: Vec<u64>, labels: Vec<usize>, features: &Tensor) -> Result<Self> {
        let g = features.rows();
        if g == 0 {
            return Err(Error::Degenerate("empty gallery".into()));
        }
        if ids.len() != g || labels.len() != g {
            return Err(Error::Shape(format!("{} ids and {} labels for {g} feature rows", ids.len(), labels.len())));
        }
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("gallery ids must be unique".into()));
        }
        let mut normalized = features.clone();
        for r in 0..g {
            let n = norm(normalized.row(r));
            if !(n > 0.0 && n.is_finite()) {
                return Err(Error::Degenerate(format!("gallery feature row {r} has norm {n}")));
            }
            normalized.row_mut(r).iter_mut().for_each(|v| *v /= n);
        }
        Ok(Self { ids, labels, features: normalized })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    /// Cosine similarity of every query row against every gallery item.
    pub fn similarities(&self, queries: &Tensor) -> Result<Tensor> {
        if queries.cols() != self.dim() {
            return Err(Error::Shape(format!("query dim {} vs gallery dim {}", queries.cols(), self.dim())));
        }
        let mut q = queries.clone();
        for r in 0..q.rows() {
            let n = norm(q.row(r));
            if !(n > 0.0 && n.is_finite()) {
                return Err(Error::Degenerate(format!("query {r} has norm {n}")));
            }
            q.row_mut(r).iter_mut().for_each(|v| *v /= n);
        }
        Ok(q.matmul_nt(&self.features))
    }
}

/// One query's ranking: gallery indices best first, with their scores and
/// relevance.
#[derive(Clone, Debug, PartialEq)]
pub struct Ranking {
    pub order: Vec<usize>,
    pub scores: Vec<f64>,
    pub relevant: Vec<bool>,
}

impl Ranking {
    pub fn num_relevant(&self) -> usize {
        self.relevant.iter().filter(|&&r| r).count()
    }

    /// 1-based rank of the first relevant item.
    pub fn first_hit(&self) -> Option<usize> {
        self.relevant.iter().position(|&r| r).map(|p| p + 1)
    }
}

/// Descending score, then ascending id.
pub fn rank_order(scores: &[f64], ids: &[u64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| match scores[b].total_cmp(&scores[a]) {
        Ordering::Equal => ids[a].cmp(&ids[b]),
        o => o,
    });
    order
}

/// Ranks the gallery for one scored query. `relevant_label` marks gallery
/// items of that identity as relevant.
pub fn rank_scores(scores: &[f64], gallery: &Gallery, relevant_label: Option<usize>) -> Ranking {
    let order = rank_order(scores, &gallery.ids);
    Ranking {
        scores: order.iter().map(|&i| scores[i]).collect(),
        relevant: order.iter().map(|&i| Some(gallery.labels[i]) == relevant_label).collect(),
        order,
    }
}

pub fn rank_gallery(query: &[f64], gallery: &Gallery, relevant_label: Option<usize>) -> Result<Ranking> {
    let sims = gallery.similarities(&Tensor::row_vector(query.to_vec()))?;
    Ok(rank_scores(sims.row(0), gallery, relevant_label))
}

/// Rankings for a set of labeled queries, from one similarity-matrix product.
#[derive(Clone, Debug, PartialEq)]
pub struct RankingResults {
    pub rankings: Vec<Ranking>,
}

impl RankingResults {
    pub fn from_queries(queries: &Tensor, labels: &[usize], gallery: &Gallery) -> Result<Self> {
        if labels.len() != queries.rows() {
            return Err(Error::Shape(format!("{} labels for {} queries", labels.len(), queries.rows())));
        }
        let sims = gallery.similarities(queries)?;
        Ok(Self::from_similarity(&sims, labels, gallery))
    }

    pub fn from_similarity(sims: &Tensor, labels: &[usize], gallery: &Gallery) -> Self {
        let rankings = (0..sims.rows()).map(|q| rank_scores(sims.row(q), gallery, Some(labels[q]))).collect();
        Self { rankings }
    }

    /// Queries with at least one relevant item; others are excluded from metrics.
    fn scored(&self) -> Result<Vec<&Ranking>> {
        let kept: Vec<&Ranking> = self.rankings.iter().filter(|r| r.relevant.contains(&true)).collect();
        if kept.is_empty() {
            return Err(Error::Degenerate("no query has a relevant gallery item".into()));
        }
        Ok(kept)
    }

    pub fn excluded_queries(&self) -> usize {
        self.rankings.iter().filter(|r| !r.relevant.contains(&true)).count()
    }

    pub fn gallery_size(&self) -> usize {
        self.rankings.first().map_or(0, |r| r.order.len())
    }
}

/// Fraction of queries with a relevant item in the top `k`.
pub fn rank_k(results: &RankingResults, k: usize) -> Result<f64> {
    let g = results.gallery_size();
    if k < 1 || k > g {
        return Err(Error::Domain(format!("rank-k needs 1 <= k <= {g}, got {k}")));
    }
    let scored = results.scored()?;
    let hits = scored.iter().filter(|r| r.relevant[..k].contains(&true)).count();
    Ok(hits as f64 / scored.len() as f64)
}

/// Average precision of one ranking (0 if nothing is relevant).
pub fn average_precision(relevant: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (pos, _) in relevant.iter().enumerate().filter(|(_, &r)| r) {
        hits += 1;
        sum += hits as f64 / (pos + 1) as f64;
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

/// Inverse negative penalty: relevant count over the rank of the last hit.
pub fn inverse_negative_penalty(relevant: &[bool]) -> f64 {
    match relevant.iter().rposition(|&r| r) {
        Some(last) => relevant.iter().filter(|&&r| r).count() as f64 / (last + 1) as f64,
        None => 0.0,
    }
}

pub fn mean_average_precision(results: &RankingResults) -> Result<f64> {
    let scored = results.scored()?;
    Ok(scored.iter().map(|r| average_precision(&r.relevant)).sum::<f64>() / scored.len() as f64)
}

pub fn mean_inp(results: &RankingResults) -> Result<f64> {
    let scored = results.scored()?;
    Ok(scored.iter().map(|r| inverse_negative_penalty(&r.relevant)).sum::<f64>() / scored.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    pub minp: f64,
    pub num_queries: usize,
    pub excluded_queries: usize,
    pub gallery_size: usize,
}

impl MetricsReport {
    /// Rank-5/10 are clamped to the gallery size for tiny galleries.
    pub fn compute(results: &RankingResults) -> Result<Self> {
        let g = results.gallery_size();
        let excluded = results.excluded_queries();
        if excluded > 0 {
            log::warn!("{excluded} queries have no relevant gallery item and are excluded from metrics");
        }
        Ok(Self {
            rank1: rank_k(results, 1)?,
            rank5: rank_k(results, 5.min(g))?,
            rank10: rank_k(results, 10.min(g))?,
            map: mean_average_precision(results)?,
            minp: mean_inp(results)?,
            num_queries: results.rankings.len() - excluded,
            excluded_queries: excluded,
            gallery_size: g,
        })
    }

    /// Aligned text table with percentages, one header and one value row.
    pub fn table(&self) -> alloc::string::String {
        let cols = ["Rank-1", "Rank-5", "Rank-10", "mAP", "mINP"];
        let vals = [self.rank1, self.rank5, self.rank10, self.map, self.minp];
        let mut head = alloc::string::String::new();
        let mut row = alloc::string::String::new();
        for (c, v) in cols.iter().zip(vals) {
            head += &format!("{c:>9}");
            row += &format!("{:>9.2}", v * 100.0);
        }
        format!("{head}\n{row}\n")
    }
}

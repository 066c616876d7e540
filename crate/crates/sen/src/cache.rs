//! Gallery feature cache and cached text-to-image search.
//!
//! Layout: magic `SENGAL01`, u64 LE header length, JSON header
//! `{dim, count, checksum, paths}`, then `count` ids (u64 LE), `count`
//! labels (u64 LE) and the `count × dim` normalized features (f64 LE).
//! `checksum` is the SHA-256 of the payload in hex.

use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sen_core::data::Dataset;
use sen_core::encoders::Tokenizer;
use sen_core::model::{encode_split, SenModel};
use sen_core::retrieval::{rank_order, Gallery};
use sen_core::Tensor;

use crate::error::{Error, Result};
use crate::format::{bytes_to_f64s, bytes_to_u64s, f64s_to_bytes, read_container, u64s_to_bytes, write_container};

pub const CACHE_MAGIC: &[u8; 8] = b"SENGAL01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    dim: usize,
    count: usize,
    checksum: String,
    #[serde(default)]
    paths: Vec<String>,
}

/// A gallery plus optional display paths, one per item.
#[derive(Clone, Debug, PartialEq)]
pub struct GalleryCache {
    pub gallery: Gallery,
    pub paths: Vec<String>,
}

impl GalleryCache {
    /// Encodes every image of `dataset` once.
    pub fn build(model: &SenModel, dataset: &Dataset, tokenizer: &dyn Tokenizer, max_len: usize) -> Result<Self> {
        let enc = encode_split(model, dataset, tokenizer, max_len)?;
        let gallery = Gallery::new(enc.image_ids, enc.image_labels, &enc.image_features)?;
        Ok(Self { gallery, paths: Vec::new() })
    }

    pub fn with_paths(mut self, paths: Vec<String>) -> Self {
        self.paths = paths;
        self
    }

    fn payload(&self) -> Vec<u8> {
        let g = &self.gallery;
        let mut out = Vec::with_capacity(8 * g.len() * (2 + g.dim()));
        u64s_to_bytes(g.ids().iter().copied(), &mut out);
        u64s_to_bytes(g.labels().iter().map(|&l| l as u64), &mut out);
        f64s_to_bytes(g.features().data().iter().copied(), &mut out);
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let payload = self.payload();
        let header = Header {
            dim: self.gallery.dim(),
            count: self.gallery.len(),
            checksum: hex::encode(Sha256::digest(&payload)),
            paths: self.paths.clone(),
        };
        write_container(path, CACHE_MAGIC, &header, &payload)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingCache { path: path.into() });
        }
        let (h, payload): (Header, _) = read_container(path, CACHE_MAGIC)?;
        let bad = |message: String| Error::Format { path: path.into(), message };
        let expected_len = h.count.checked_mul(8 * (2 + h.dim)).ok_or_else(|| bad("header overflows".into()))?;
        if payload.len() != expected_len {
            return Err(bad(format!("payload is {} bytes, header implies {expected_len}", payload.len())));
        }
        if hex::encode(Sha256::digest(&payload)) != h.checksum {
            return Err(bad("checksum mismatch; rebuild the cache".into()));
        }
        if !h.paths.is_empty() && h.paths.len() != h.count {
            return Err(bad(format!("{} paths for {} items", h.paths.len(), h.count)));
        }
        let n = h.count;
        let ids = bytes_to_u64s(&payload[..8 * n]);
        let labels = bytes_to_u64s(&payload[8 * n..16 * n]).into_iter().map(|l| l as usize).collect();
        let features = Tensor::from_vec(n, h.dim, bytes_to_f64s(&payload[16 * n..]));
        Ok(Self { gallery: Gallery::new(ids, labels, &features)?, paths: h.paths })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub rank: usize,
    pub id: u64,
    pub label: usize,
    pub score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub query: String,
    pub hits: Vec<Hit>,
    pub latency_ms: f64,
}

/// Encodes the query text and ranks the cached gallery. `top_k` above the
/// gallery size is clamped with a warning. Never mutates the cache.
pub fn search(
    model: &SenModel,
    tokenizer: &dyn Tokenizer,
    cache: &GalleryCache,
    max_len: usize,
    query: &str,
    top_k: usize,
) -> Result<SearchResult> {
    let start = Instant::now();
    let g = &cache.gallery;
    let k = if top_k > g.len() {
        log::warn!("top-k {top_k} exceeds gallery size {}; returning all items", g.len());
        g.len()
    } else {
        top_k
    };
    let feature = model.text_feature(&tokenizer.encode(query, max_len))?;
    let sims = g.similarities(&Tensor::row_vector(feature))?;
    let scores = sims.row(0);
    let hits = rank_order(scores, g.ids())
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(r, j)| Hit {
            rank: r + 1,
            id: g.ids()[j],
            label: g.labels()[j],
            score: scores[j],
            path: cache.paths.get(j).cloned(),
        })
        .collect();
    let latency = start.elapsed();
    log::debug!("query answered in {:.3} ms", ms(latency));
    Ok(SearchResult { query: query.to_string(), hits, latency_ms: ms(latency) })
}

pub fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

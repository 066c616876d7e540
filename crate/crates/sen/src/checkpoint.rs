//! Model checkpoints.
//!
//! Layout: magic `SENCKPT1`, u64 LE header length, JSON header, then every
//! tensor's values as f64 LE in header order. The header carries the full
//! experiment config and vocabulary, so a checkpoint alone rebuilds the model.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sen_core::config::ExperimentConfig;
use sen_core::encoders::WordTokenizer;
use sen_core::model::SenModel;
use sen_core::params::{LoadReport, ParamStore};
use sen_core::retrieval::MetricsReport;
use sen_core::Tensor;

use crate::error::{Error, Result};
use crate::format::{bytes_to_f64s, f64s_to_bytes, read_container, write_container};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SENCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    config: ExperimentConfig,
    vocab: Vec<String>,
    num_classes: usize,
    step: usize,
    #[serde(default)]
    data_dir: Option<PathBuf>,
    #[serde(default)]
    train_metrics: Option<MetricsReport>,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub vocab: Vec<String>,
    pub num_classes: usize,
    pub step: usize,
    /// Dataset the model was trained on, for `eval` without `--data`.
    pub data_dir: Option<PathBuf>,
    pub train_metrics: Option<MetricsReport>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(cfg: &ExperimentConfig, model: &SenModel, tokenizer: &WordTokenizer, step: usize) -> Self {
        Self {
            config: cfg.clone(),
            vocab: tokenizer.words().to_vec(),
            num_classes: model.num_classes,
            step,
            data_dir: None,
            train_metrics: None,
            tensors: model.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            num_classes: self.num_classes,
            step: self.step,
            data_dir: self.data_dir.clone(),
            train_metrics: self.train_metrics.clone(),
            tensors: self.tensors.iter().map(|(n, t)| TensorEntry { name: n.clone(), rows: t.rows(), cols: t.cols() }).collect(),
        };
        let mut payload = Vec::with_capacity(8 * self.tensors.iter().map(|(_, t)| t.len()).sum::<usize>());
        for (_, t) in &self.tensors {
            f64s_to_bytes(t.data().iter().copied(), &mut payload);
        }
        write_container(path, CHECKPOINT_MAGIC, &header, &payload)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, payload): (Header, _) = read_container(path, CHECKPOINT_MAGIC)?;
        let values = bytes_to_f64s(&payload);
        let expected: usize = h.tensors.iter().map(|e| e.rows * e.cols).sum();
        if payload.len() % 8 != 0 || values.len() != expected {
            return Err(Error::Format {
                path: path.into(),
                message: format!("payload holds {} values, header lists {expected}", values.len()),
            });
        }
        let mut offset = 0;
        let tensors = h
            .tensors
            .into_iter()
            .map(|e| {
                let n = e.rows * e.cols;
                let t = Tensor::from_vec(e.rows, e.cols, values[offset..offset + n].to_vec());
                offset += n;
                (e.name, t)
            })
            .collect();
        Ok(Self {
            config: h.config,
            vocab: h.vocab,
            num_classes: h.num_classes,
            step: h.step,
            data_dir: h.data_dir,
            train_metrics: h.train_metrics,
            tensors,
        })
    }

    pub fn tokenizer(&self) -> Result<WordTokenizer> {
        Ok(WordTokenizer::from_vocab(self.vocab.clone())?)
    }

    /// Copies weights into an existing store. Without `strict`, parameters
    /// absent from the checkpoint keep their values and extra entries are
    /// skipped; shapes must always match.
    pub fn load_into(&self, store: &mut ParamStore, strict: bool) -> Result<LoadReport> {
        let report = store.load(self.tensors.iter().cloned(), strict)?;
        if !report.missing.is_empty() {
            log::warn!("{} parameters not in checkpoint, kept at initialization", report.missing.len());
        }
        if !report.unexpected.is_empty() {
            log::warn!("ignored {} unknown checkpoint entries", report.unexpected.len());
        }
        Ok(report)
    }

    /// Rebuilds the model and tokenizer the checkpoint was saved from.
    pub fn build(&self) -> Result<(SenModel, WordTokenizer)> {
        let tokenizer = self.tokenizer()?;
        let mut model = SenModel::new(&self.config, self.num_classes)?;
        self.load_into(&mut model.store, true)?;
        Ok((model, tokenizer))
    }
}

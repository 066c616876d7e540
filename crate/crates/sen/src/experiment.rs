//! Training and evaluation runs backed by files on disk.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sen_core::augmentation::{PosClass, RuleTagger};
use sen_core::config::ExperimentConfig;
use sen_core::data::{Dataset, Split};
use sen_core::encoders::EncoderConfig;
use sen_core::retrieval::MetricsReport;
use sen_core::train::{evaluate, StepLog, TrainError, Trainer};

use crate::annotations::load_split;
use crate::checkpoint::Checkpoint;
use crate::error::{io_err, Error, Result};
use crate::runlog::JsonlWriter;
use crate::synth::write_json;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const METRICS_FILE: &str = "metrics.json";
pub const SNAPSHOT_FILE: &str = "nonfinite_batch.json";

/// `toy`, `default` and `clip` name the built-in presets; anything else is
/// a JSON file.
pub fn load_config(spec: &str) -> Result<ExperimentConfig> {
    let cfg = match spec {
        "toy" => ExperimentConfig::toy(),
        "default" => ExperimentConfig::default(),
        "clip" => ExperimentConfig { encoder: EncoderConfig::clip_b16(), ..ExperimentConfig::default() },
        path => {
            let path = Path::new(path);
            let text = std::fs::read_to_string(path).map_err(io_err(path))?;
            serde_json::from_str(&text).map_err(|source| Error::Json { path: path.into(), source })?
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_pos_class(name: &str) -> Option<PosClass> {
    Some(match name.to_ascii_lowercase().as_str() {
        "pronoun" => PosClass::Pronoun,
        "adjective" | "adj" => PosClass::Adjective,
        "noun" => PosClass::Noun,
        "verb" => PosClass::Verb,
        "other" | "stop" => PosClass::Other,
        _ => return None,
    })
}

/// Default tagger extended with `(class, word-list file)` overrides.
pub fn build_tagger(lists: &[(PosClass, PathBuf)]) -> Result<RuleTagger> {
    let mut tagger = RuleTagger::default();
    for (class, path) in lists {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        tagger = tagger.with_words(*class, text.lines());
    }
    Ok(tagger)
}

pub fn load_dataset(data: &Path, split: Split, cfg: &ExperimentConfig) -> Result<Dataset> {
    load_split(data, split, (cfg.encoder.image_height, cfg.encoder.image_width))
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub out_dir: PathBuf,
    /// Overrides the config's training length.
    pub steps: Option<usize>,
    /// Intermediate checkpoint period in steps; 0 disables them.
    pub checkpoint_every: usize,
    pub pos_words: Vec<(PosClass, PathBuf)>,
}

impl TrainOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self { out_dir: out_dir.into(), steps: None, checkpoint_every: 0, pos_words: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub train: MetricsReport,
    pub val: Option<MetricsReport>,
    pub checkpoint: PathBuf,
}

/// Trains on the `train` split of `data`, logging every step to
/// `train_log.jsonl` in the output directory, then evaluates on the train
/// split and, when present, the val split.
pub fn train(mut cfg: ExperimentConfig, data: &Path, opts: &TrainOptions) -> Result<TrainSummary> {
    if let Some(steps) = opts.steps {
        cfg.max_steps = Some(steps);
    }
    std::fs::create_dir_all(&opts.out_dir).map_err(io_err(&opts.out_dir))?;
    let out = &opts.out_dir;
    let dataset = load_dataset(data, Split::Train, &cfg)?;
    let mut trainer = Trainer::from_dataset(cfg, dataset)?.with_tagger(Box::new(build_tagger(&opts.pos_words)?));
    log::info!(
        "training {} steps, {} parameters",
        trainer.total_steps(),
        trainer.model.store.num_scalars()
    );
    let mut log = JsonlWriter::create(&out.join(LOG_FILE))?;
    while trainer.steps_done() < trainer.total_steps() {
        let line: StepLog = match trainer.train_step() {
            Ok(line) => line,
            Err(TrainError::NonFinite(snapshot)) => {
                let path = out.join(SNAPSHOT_FILE);
                write_json(&path, &snapshot)?;
                log::error!("non-finite loss; offending batch written to {}", path.display());
                return Err(TrainError::NonFinite(snapshot).into());
            }
            Err(e) => return Err(e.into()),
        };
        log.write(&line)?;
        if line.step.is_multiple_of(20) {
            log::info!("step {} lr {:.2e} loss {:.4}", line.step, line.lr, line.total);
        }
        let done = trainer.steps_done();
        if opts.checkpoint_every > 0 && done % opts.checkpoint_every == 0 && done < trainer.total_steps() {
            let ckpt = Checkpoint::from_model(&trainer.cfg, &trainer.model, &trainer.tokenizer, done);
            ckpt.save(&out.join(format!("step_{done:06}.ckpt")))?;
        }
    }
    let train_metrics = trainer.evaluate_train()?;
    log::info!("train split\n{}", train_metrics.table());
    let val = load_dataset(data, Split::Val, &trainer.cfg)?;
    let val_metrics = if val.is_empty() {
        log::warn!("no val split in {}; skipping validation", data.display());
        None
    } else {
        let m = trainer.evaluate(&val)?;
        log::info!("val split\n{}", m.table());
        Some(m)
    };
    let mut ckpt = Checkpoint::from_model(&trainer.cfg, &trainer.model, &trainer.tokenizer, trainer.steps_done());
    ckpt.data_dir = std::path::absolute(data).ok();
    ckpt.train_metrics = Some(train_metrics.clone());
    let path = out.join(FINAL_CHECKPOINT);
    ckpt.save(&path)?;
    let summary = TrainSummary { steps: trainer.steps_done(), train: train_metrics, val: val_metrics, checkpoint: path };
    write_json(&out.join(METRICS_FILE), &summary)?;
    Ok(summary)
}

/// Data directory given explicitly or recorded in the checkpoint.
pub fn resolve_data(ckpt: &Checkpoint, data: Option<&Path>) -> Result<PathBuf> {
    data.map(Path::to_path_buf)
        .or_else(|| ckpt.data_dir.clone())
        .ok_or_else(|| Error::Annotations("checkpoint records no dataset; pass --data".into()))
}

pub fn evaluate_checkpoint(ckpt: &Checkpoint, data: &Path, split: Split) -> Result<MetricsReport> {
    let (model, tokenizer) = ckpt.build()?;
    let dataset = load_dataset(data, split, &ckpt.config)?;
    if dataset.is_empty() {
        return Err(sen_core::Error::Degenerate(format!("{split} split of {} is empty", data.display())).into());
    }
    Ok(evaluate(&model, &tokenizer, &dataset, ckpt.config.encoder.max_text_len)?)
}

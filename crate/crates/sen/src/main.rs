use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use sen::ablation::{self, Axis};
use sen::annotations::image_paths;
use sen::cache::{ms, search, GalleryCache};
use sen::checkpoint::Checkpoint;
use sen::experiment::{self, load_config, load_dataset, parse_pos_class, resolve_data, TrainOptions};
use sen::synth::{read_spec, write_json, write_synthetic};
use sen_core::augmentation::PosClass;
use sen_core::data::Split;

#[derive(Parser)]
#[command(name = "sen", version, about = "Text-to-image person retrieval: training, evaluation and search")]
struct Cli {
    /// Log filter, e.g. `info` or `sen=debug`.
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write logs, checkpoints and metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Sweep one configuration axis and report metrics per cell.
    Ablate(AblateArgs),
    /// Answer a text query against a gallery cache.
    Retrieve(RetrieveArgs),
    /// Encode a split's images into a gallery cache.
    BuildCache(BuildCacheArgs),
    /// Render a synthetic dataset.
    GenData(GenDataArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// JSON config file, or a preset: `toy`, `default` or `clip`.
    #[arg(long)]
    config: String,
    /// Dataset directory (or its annotations.json).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
    /// Training steps, overriding the config.
    #[arg(long)]
    steps: Option<usize>,
    /// Save an intermediate checkpoint every N steps (0 = final only).
    #[arg(long, default_value_t = 100)]
    checkpoint_every: usize,
    /// Extra tagger word list, one word per line: `CLASS=PATH` with CLASS
    /// one of pronoun, adjective, noun, verb, other. Repeatable.
    #[arg(long = "pos-words", value_parser = parse_pos_words)]
    pos_words: Vec<(PosClass, PathBuf)>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Defaults to the dataset recorded in the checkpoint.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Also write the report as JSON here.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    axis: Axis,
    #[arg(long, default_value = "toy")]
    config: String,
    #[arg(long)]
    data: PathBuf,
    /// Split each cell is evaluated on.
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Write the full report as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    cache: PathBuf,
    #[arg(long)]
    query: String,
    #[arg(long, default_value_t = 10)]
    top_k: usize,
    /// Run the query this many times and report latency statistics.
    #[arg(long, default_value_t = 1)]
    repeat: usize,
    /// Print results as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct BuildCacheArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenDataArgs {
    /// JSON synthetic dataset spec.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_pos_words(s: &str) -> Result<(PosClass, PathBuf), String> {
    let (class, path) = s.split_once('=').ok_or("expected CLASS=PATH")?;
    let class = parse_pos_class(class).ok_or_else(|| format!("unknown word class `{class}`"))?;
    Ok((class, PathBuf::from(path)))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).format_timestamp(None).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Train(a) => {
            let cfg = load_config(&a.config)?;
            let opts = TrainOptions { out_dir: a.out, steps: a.steps, checkpoint_every: a.checkpoint_every, pos_words: a.pos_words };
            let summary = experiment::train(cfg, &a.data, &opts)?;
            println!("train split ({} steps)\n{}", summary.steps, summary.train.table());
            if let Some(val) = &summary.val {
                println!("val split\n{}", val.table());
            }
            println!("checkpoint: {}", summary.checkpoint.display());
        }
        Command::Eval(a) => {
            let ckpt = Checkpoint::load(&a.ckpt)?;
            let data = resolve_data(&ckpt, a.data.as_deref())?;
            let report = experiment::evaluate_checkpoint(&ckpt, &data, a.split)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            println!("{}", report.table());
            if let Some(path) = a.json {
                write_json(&path, &report)?;
            }
        }
        Command::Ablate(a) => {
            if a.seeds.is_empty() {
                bail!("--seeds needs at least one value");
            }
            let mut cfg = load_config(&a.config)?;
            if let Some(steps) = a.steps {
                cfg.max_steps = Some(steps);
            }
            let train = load_dataset(&a.data, Split::Train, &cfg)?;
            let eval = load_dataset(&a.data, a.split, &cfg)?;
            if eval.is_empty() {
                bail!("{} split of {} is empty", a.split, a.data.display());
            }
            let report = ablation::run(&cfg, a.axis, &a.seeds, &train, &eval, |cell| {
                log::info!("{} = {}: Rank-1 {:.2}", a.axis, cell.name, cell.mean.rank1 * 100.0);
            })?;
            print!("{}", report.table());
            if let Some(path) = a.out {
                write_json(&path, &report)?;
            }
        }
        Command::Retrieve(a) => {
            let cache = GalleryCache::load(&a.cache)?;
            let ckpt = Checkpoint::load(&a.ckpt)?;
            let (model, tokenizer) = ckpt.build()?;
            if ckpt.config.encoder.embed_dim != cache.gallery.dim() {
                bail!("cache dim {} does not match checkpoint dim {}", cache.gallery.dim(), ckpt.config.encoder.embed_dim);
            }
            let max_len = ckpt.config.encoder.max_text_len;
            let mut top_k = a.top_k;
            if top_k > cache.gallery.len() {
                log::warn!("top-k {top_k} exceeds gallery size {}; returning all items", cache.gallery.len());
                top_k = cache.gallery.len();
            }
            let repeat = a.repeat.max(1);
            let start = Instant::now();
            let mut result = search(&model, &tokenizer, &cache, max_len, &a.query, top_k)?;
            for _ in 1..repeat {
                result = search(&model, &tokenizer, &cache, max_len, &a.query, top_k)?;
            }
            log::info!("{repeat} queries, {:.3} ms per query", ms(start.elapsed()) / repeat as f64);
            if a.json {
                println!("{}", serde_json::to_string_pretty(&result)?);
            } else {
                println!("{:>4} {:>8} {:>6} {:>9}  path", "rank", "id", "label", "score");
                for h in &result.hits {
                    println!("{:>4} {:>8} {:>6} {:>9.4}  {}", h.rank, h.id, h.label, h.score, h.path.as_deref().unwrap_or("-"));
                }
            }
        }
        Command::BuildCache(a) => {
            let ckpt = Checkpoint::load(&a.ckpt)?;
            let data = resolve_data(&ckpt, a.data.as_deref())?;
            let (model, tokenizer) = ckpt.build()?;
            let dataset = load_dataset(&data, a.split, &ckpt.config)?;
            let start = Instant::now();
            let cache = GalleryCache::build(&model, &dataset, &tokenizer, ckpt.config.encoder.max_text_len)?;
            let paths = image_paths(&data)?;
            let shown = dataset.samples.iter().map(|s| paths[s.image_id as usize].clone()).collect();
            cache.with_paths(shown).save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
            println!("cached {} images in {:.1} ms -> {}", dataset.len(), ms(start.elapsed()), a.out.display());
        }
        Command::GenData(a) => {
            let spec = read_spec(&a.spec)?;
            let images = write_synthetic(&spec, Path::new(&a.out))?;
            println!("{} images, {} identities -> {}", images.len(), spec.num_identities, a.out.display());
        }
    }
    Ok(())
}

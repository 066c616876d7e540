use std::path::Path;

use sen::ablation::{self, component_rows, Axis};
use sen::annotations::{load_annotations, load_split, parse_annotations};
use sen::cache::{search, GalleryCache};
use sen::checkpoint::Checkpoint;
use sen::experiment::{build_tagger, load_config, parse_pos_class};
use sen::images::save_png;
use sen::runlog::{read_jsonl, JsonlWriter};
use sen::synth::{list_files, write_json, write_synthetic, Manifest, MANIFEST_FILE};
use sen::Error;
use sen_core::augmentation::{PosClass, PosTagger};
use sen_core::config::ExperimentConfig;
use sen_core::data::{caption_colors, default_palette, dominant_color, garment_core, Garment, Split, SyntheticSpec};
use sen_core::encoders::{ImageTensor, Tokenizer, WordTokenizer};
use sen_core::losses::ComponentFlags;
use sen_core::model::SenModel;
use sen_core::params::LoadError;
use sen_core::train::{evaluate, Trainer};
use tempfile::tempdir;

fn write_fixture(dir: &Path, json: &str, images: &[&str]) {
    std::fs::create_dir_all(dir.join("imgs")).unwrap();
    for name in images {
        save_png(&ImageTensor::filled(8, 4, [0.5, 0.2, 0.1]), &dir.join(name)).unwrap();
    }
    std::fs::write(dir.join("annotations.json"), json).unwrap();
}

const FOUR: &str = r#"[
  {"id": 17, "file_path": "imgs/a.png", "captions": ["a man in red"], "split": "train"},
  {"id": 42, "file_path": "imgs/b.png", "captions": ["a woman in blue", "blue coat"], "split": "train"},
  {"id": 17, "file_path": "imgs/c.png", "captions": ["red shirt"], "split": "train"},
  {"id": 42, "file_path": "imgs/d.png", "captions": ["blue"], "split": "train"}
]"#;

#[test]
fn four_record_file_remaps_to_two_identities() {
    let dir = tempdir().unwrap();
    write_fixture(dir.path(), FOUR, &["imgs/a.png", "imgs/b.png", "imgs/c.png", "imgs/d.png"]);
    let records = load_annotations(dir.path()).unwrap();
    assert_eq!(records.len(), 4);
    assert_eq!(records.iter().map(|r| r.identity_id).collect::<Vec<_>>(), vec![0, 1, 0, 1]);
    let ds = load_split(dir.path(), Split::Train, (8, 4)).unwrap();
    assert_eq!((ds.len(), ds.num_identities(), ds.num_captions()), (4, 2, 5));
    assert!(load_split(dir.path(), Split::Test, (8, 4)).unwrap().is_empty());
}

#[test]
fn schema_violations_name_the_record() {
    let missing = r#"[
      {"id": 1, "file_path": "a.png", "captions": ["x"], "split": "train"},
      {"id": 1, "file_path": "b.png", "split": "train"}
    ]"#;
    match parse_annotations(missing) {
        Err(Error::Record { index: 1, message }) => assert!(message.contains("captions"), "{message}"),
        other => panic!("expected record error, got {other:?}"),
    }
    let empty = r#"[{"id": 1, "file_path": "a.png", "captions": [], "split": "train"}]"#;
    assert!(matches!(parse_annotations(empty), Err(Error::Record { index: 0, .. })));
    let bad_split = r#"[{"id": 1, "file_path": "a.png", "captions": ["x"], "split": "dev"}]"#;
    assert!(matches!(parse_annotations(bad_split), Err(Error::Record { index: 0, .. })));
    assert!(matches!(parse_annotations("{}"), Err(Error::Annotations(_))));
}

#[test]
fn missing_image_is_a_load_error() {
    let dir = tempdir().unwrap();
    write_fixture(dir.path(), FOUR, &["imgs/a.png", "imgs/b.png", "imgs/d.png"]);
    match load_annotations(&dir.path().join("annotations.json")) {
        Err(Error::MissingImage { index: 2, path }) => assert!(path.ends_with("imgs/c.png")),
        other => panic!("expected missing image, got {other:?}"),
    }
}

#[test]
fn synthetic_dataset_is_deterministic_and_loads_back() {
    let (a, b) = (tempdir().unwrap(), tempdir().unwrap());
    let spec = SyntheticSpec { test_identities: 4, val_identities: 2, ..SyntheticSpec::new(16, 4, 5) };
    let generated = write_synthetic(&spec, a.path()).unwrap();
    write_synthetic(&spec, b.path()).unwrap();
    let files = list_files(a.path()).unwrap();
    assert_eq!(files, list_files(b.path()).unwrap());
    assert_eq!(files.len(), 64 + 2);
    for f in &files {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f:?}");
    }

    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(a.path().join(MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!((manifest.seed, manifest.num_images, manifest.num_captions), (5, 64, 128));

    let records = load_annotations(a.path()).unwrap();
    assert_eq!(records.len(), 64);
    for split in Split::ALL {
        let ids: std::collections::BTreeSet<usize> = records.iter().filter(|r| r.split == split).map(|r| r.identity_id).collect();
        assert_eq!(ids, (0..ids.len()).collect(), "{split} ids contiguous");
    }

    // 8-bit PNG storage keeps every rendered pixel within one quantization step
    // and keeps captions consistent with the garment colors.
    let palette = default_palette();
    let train = load_split(a.path(), Split::Train, (64, 32)).unwrap();
    for s in &train.samples {
        let orig = &generated[s.image_id as usize].image;
        let err = orig.pixels().iter().zip(s.image.pixels()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(err <= 0.5 / 255.0 + 1e-12, "quantization error {err}");
        let colors: Vec<usize> =
            Garment::ALL.iter().map(|&g| dominant_color(&s.image, garment_core(64, 32, g), &palette)).collect();
        for c in &s.captions {
            assert_eq!(caption_colors(c, &palette), colors, "{c}");
        }
    }
}

fn trained(steps: usize, flags: ComponentFlags) -> (Trainer, sen_core::data::Dataset) {
    let images = sen_core::data::generate_synthetic(&SyntheticSpec { test_identities: 4, ..SyntheticSpec::new(12, 2, 2) }).unwrap();
    let train = sen_core::data::synthetic_split(&images, Split::Train).unwrap();
    let test = sen_core::data::synthetic_split(&images, Split::Test).unwrap();
    let mut cfg = ExperimentConfig::toy();
    cfg.components = flags;
    cfg.max_steps = Some(steps);
    let mut t = Trainer::from_dataset(cfg, train).unwrap();
    t.run(|_| {}).unwrap();
    (t, test)
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let (t, test) = trained(3, ComponentFlags { irr: true, ..ComponentFlags::default() });
    let dir = tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    Checkpoint::from_model(&t.cfg, &t.model, &t.tokenizer, 3).save(&path).unwrap();
    let ckpt = Checkpoint::load(&path).unwrap();
    assert_eq!(ckpt.config, t.cfg);
    assert_eq!(ckpt.step, 3);
    let (model, tok) = ckpt.build().unwrap();
    assert_eq!(tok, t.tokenizer);
    let s = &test.samples[0];
    assert_eq!(model.image_feature(&s.image).unwrap(), t.model.image_feature(&s.image).unwrap());
    let tokens = tok.encode(&s.captions[0], 32);
    assert_eq!(model.text_feature(&tokens).unwrap(), t.model.text_feature(&tokens).unwrap());

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[3] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::Format { .. })));
}

#[test]
fn checkpoint_shape_and_key_errors() {
    let (t, _) = trained(1, ComponentFlags::default());
    let ckpt = Checkpoint::from_model(&t.cfg, &t.model, &t.tokenizer, 1);

    let mut narrow = t.cfg.clone();
    narrow.encoder.embed_dim = 32;
    let mut other = SenModel::new(&narrow, t.model.num_classes).unwrap();
    match ckpt.load_into(&mut other.store, true) {
        Err(Error::Load(LoadError::ShapeMismatch { name, .. })) => assert!(name.starts_with("image."), "{name}"),
        other => panic!("expected shape mismatch, got {other:?}"),
    }

    // Encoder-only checkpoint into a model with the restoration decoder.
    let mut partial = ckpt.clone();
    partial.tensors.retain(|(n, _)| !n.starts_with("tir."));
    let mut fresh = SenModel::new(&t.cfg, t.model.num_classes).unwrap();
    let before: Vec<_> = fresh.store.iter().filter(|(n, _)| n.starts_with("tir.")).map(|(_, v)| v.clone()).collect();
    assert!(matches!(partial.load_into(&mut fresh.store, true), Err(Error::Load(LoadError::MissingKey(_)))));
    let report = partial.load_into(&mut fresh.store, false).unwrap();
    assert!(!report.missing.is_empty() && report.missing.iter().all(|n| n.starts_with("tir.")));
    let after: Vec<_> = fresh.store.iter().filter(|(n, _)| n.starts_with("tir.")).map(|(_, v)| v.clone()).collect();
    assert_eq!(before, after);
    for (name, value) in fresh.store.iter().filter(|(n, _)| n.starts_with("image.") || n.starts_with("text.")) {
        assert_eq!(value, t.model.store.get(t.model.store.id(name).unwrap()), "{name}");
    }
}

#[test]
fn gallery_cache_round_trip_and_search() {
    let (t, test) = trained(2, ComponentFlags::baseline());
    let dir = tempdir().unwrap();
    let path = dir.path().join("g.cache");
    let paths: Vec<String> = (0..test.len()).map(|i| format!("img{i}.png")).collect();
    let cache = GalleryCache::build(&t.model, &test, &t.tokenizer, 32).unwrap().with_paths(paths);
    cache.save(&path).unwrap();
    let loaded = GalleryCache::load(&path).unwrap();
    assert_eq!(loaded.gallery.ids(), cache.gallery.ids());
    assert_eq!(loaded.gallery.labels(), cache.gallery.labels());
    assert!(loaded.gallery.features().max_abs_diff(cache.gallery.features()) < 1e-15);

    let q = &test.samples[1].captions[0];
    let r = search(&t.model, &t.tokenizer, &loaded, 32, q, 1000).unwrap();
    assert_eq!(r.hits.len(), test.len());
    assert!(r.hits.windows(2).all(|w| w[0].score >= w[1].score));
    assert_eq!(r.hits[0].rank, 1);
    assert!(r.hits[0].path.as_deref().unwrap().starts_with("img"));
    let again = search(&t.model, &t.tokenizer, &loaded, 32, q, 1000).unwrap();
    assert_eq!(again.hits, r.hits);

    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&path, &bytes).unwrap();
    match GalleryCache::load(&path) {
        Err(Error::Format { message, .. }) => assert!(message.contains("checksum"), "{message}"),
        other => panic!("expected checksum error, got {other:?}"),
    }
    let missing = GalleryCache::load(&dir.path().join("none.cache")).unwrap_err();
    assert!(missing.to_string().contains("sen build-cache"), "{missing}");
}

#[test]
fn random_model_is_near_chance() {
    let images = sen_core::data::generate_synthetic(&SyntheticSpec { test_identities: 16, ..SyntheticSpec::new(20, 4, 8) }).unwrap();
    let test = sen_core::data::synthetic_split(&images, Split::Test).unwrap();
    assert_eq!(test.num_identities(), 16);
    let tok = WordTokenizer::from_corpus(test.samples.iter().flat_map(|s| s.captions.iter().map(String::as_str)));
    let mut cfg = ExperimentConfig::toy();
    cfg.encoder.vocab_size = tok.vocab_size();
    let mut total = 0.0;
    for seed in 0..3 {
        cfg.seed = seed;
        let model = SenModel::new(&cfg, 4).unwrap();
        let m = evaluate(&model, &tok, &test, 32).unwrap();
        assert!(m.rank1 <= 3.0 / 16.0, "seed {seed}: Rank-1 {}", m.rank1);
        total += m.rank1;
    }
    assert!(total / 3.0 <= 3.0 / 16.0);
}

#[test]
fn config_files_and_presets() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    let mut cfg = ExperimentConfig::toy();
    cfg.components = ComponentFlags::baseline();
    write_json(&path, &cfg).unwrap();
    let loaded = load_config(path.to_str().unwrap()).unwrap();
    assert_eq!(loaded, cfg);
    assert_eq!(serde_json::to_string_pretty(&loaded).unwrap() + "\n", std::fs::read_to_string(&path).unwrap());
    assert_eq!(load_config("toy").unwrap(), ExperimentConfig::toy());
    assert_eq!(load_config("default").unwrap(), ExperimentConfig::default());
    assert_eq!(load_config("clip").unwrap().encoder.embed_dim, 512);
    std::fs::write(&path, r#"{"seed": 1}"#).unwrap();
    assert!(load_config(path.to_str().unwrap()).is_err());
}

#[test]
fn tagger_word_lists_override_defaults() {
    let dir = tempdir().unwrap();
    let list = dir.path().join("verbs.txt");
    std::fs::write(&list, "# extra verbs\nlugging\n\n").unwrap();
    assert_eq!(parse_pos_class("Verb"), Some(PosClass::Verb));
    assert_eq!(parse_pos_class("gerund"), None);
    let tagger = build_tagger(&[(PosClass::Verb, list), (PosClass::Other, {
        let p = dir.path().join("stop.txt");
        std::fs::write(&p, "man\n").unwrap();
        p
    })])
    .unwrap();
    assert_eq!(tagger.tag_word("lugging"), PosClass::Verb);
    assert_eq!(tagger.tag_word("man"), PosClass::Other);
}

#[test]
fn jsonl_lines_round_trip() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("log.jsonl");
    let mut w = JsonlWriter::create(&path).unwrap();
    for i in 0..3 {
        w.write(&serde_json::json!({"step": i, "total": 1.5})).unwrap();
    }
    let lines = read_jsonl(&path).unwrap();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[2]["step"], 2);
}

#[test]
fn ablation_grids() {
    let base = ExperimentConfig::toy();
    let rows = component_rows();
    let flags: Vec<(bool, bool, bool)> = rows.iter().map(|(_, f)| (f.cmt, f.irr, f.tir)).collect();
    assert_eq!(
        flags,
        vec![
            (false, false, false),
            (true, false, false),
            (false, true, false),
            (false, false, true),
            (true, true, false),
            (false, true, true),
            (true, true, true),
            (true, false, true),
        ]
    );
    assert!(rows.iter().all(|(_, f)| f.sdm && f.id));

    let mask: Vec<f64> = ablation::cells(&base, Axis::MaskRatio).iter().map(|(_, c)| c.mask_ratio).collect();
    assert_eq!(mask, (1..=9).map(|i| i as f64 / 10.0).collect::<Vec<_>>());
    let variants: Vec<String> = ablation::cells(&base, Axis::DecoderVariant).into_iter().map(|(n, _)| n).collect();
    assert_eq!(variants, ["cross", "fuse", "concat"]);
    let depth = ablation::cells(&base, Axis::DecoderDepth);
    assert!(depth.iter().any(|(_, c)| c.decoder.depth == 4) && depth.iter().all(|(_, c)| c.components.tir));
    for a in Axis::ALL {
        assert_eq!(a.name().parse::<Axis>().unwrap(), a);
        for (_, c) in ablation::cells(&base, a) {
            c.validate().unwrap();
        }
    }
    assert!("depth".parse::<Axis>().is_err());
}

#[test]
fn ablation_run_reports_every_cell() {
    let images = sen_core::data::generate_synthetic(&SyntheticSpec { test_identities: 4, ..SyntheticSpec::new(12, 2, 4) }).unwrap();
    let train = sen_core::data::synthetic_split(&images, Split::Train).unwrap();
    let test = sen_core::data::synthetic_split(&images, Split::Test).unwrap();
    let mut base = ExperimentConfig::toy();
    base.max_steps = Some(1);
    let mut seen = 0;
    let report = ablation::run(&base, Axis::Components, &[0, 1], &train, &test, |_| seen += 1).unwrap();
    assert_eq!((seen, report.cells.len()), (8, 8));
    assert!(report.cells.iter().all(|c| c.per_seed.len() == 2));
    let table = report.table();
    assert_eq!(table.lines().count(), 9);
    for col in ["Rank-1", "Rank-5", "Rank-10", "mAP", "mINP"] {
        assert!(table.lines().next().unwrap().contains(col));
    }
    assert!(report.cell("SEN").is_some() && report.cell("CMT+IRR+TIR").is_some());
}

//! CUHK-PEDES style annotation files.
//!
//! The file is a JSON array of `{"id", "file_path", "captions", "split"}`
//! objects; image paths are relative to the file's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sen_core::data::{remap_identities, AnnotationRecord, Dataset, Sample, Split};

use crate::error::{io_err, Error, Result};
use crate::images::load_image;

pub const ANNOTATION_FILE: &str = "annotations.json";

/// Parses and remaps without touching the filesystem.
pub fn parse_annotations(json: &str) -> Result<Vec<AnnotationRecord>> {
    let values: Vec<serde_json::Value> =
        serde_json::from_str(json).map_err(|e| Error::Annotations(format!("expected a JSON array of records: {e}")))?;
    let mut records = Vec::with_capacity(values.len());
    for (index, v) in values.into_iter().enumerate() {
        let r: AnnotationRecord =
            serde_json::from_value(v).map_err(|e| Error::Record { index, message: e.to_string() })?;
        if r.captions.is_empty() {
            return Err(Error::Record { index, message: "captions list is empty".into() });
        }
        records.push(r);
    }
    remap_identities(records).map_err(Error::from)
}

/// Accepts either the annotation file itself or a directory containing it.
pub fn annotation_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join(ANNOTATION_FILE)
    } else {
        data.to_path_buf()
    }
}

/// Loads, remaps identities per split and checks that every image exists.
pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let path = annotation_path(path);
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let records = parse_annotations(&text)?;
    let root = path.parent().unwrap_or(Path::new("."));
    for (index, r) in records.iter().enumerate() {
        let img = root.join(&r.image_path);
        if !img.is_file() {
            return Err(Error::MissingImage { index, path: img });
        }
    }
    let sizes = split_sizes(&records);
    log::info!(
        "{}: {} records ({})",
        path.display(),
        records.len(),
        sizes.iter().map(|(s, n)| format!("{s} {n}")).collect::<Vec<_>>().join(", ")
    );
    Ok(records)
}

pub fn split_sizes(records: &[AnnotationRecord]) -> BTreeMap<Split, usize> {
    let mut sizes = BTreeMap::new();
    for r in records {
        *sizes.entry(r.split).or_insert(0) += 1;
    }
    sizes
}

/// Images of one split, resized to `size` (height, width). Image ids are the
/// record indices in the annotation file.
pub fn load_split(data: &Path, split: Split, size: (usize, usize)) -> Result<Dataset> {
    let path = annotation_path(data);
    let records = load_annotations(&path)?;
    let root = path.parent().unwrap_or(Path::new("."));
    let mut samples = Vec::new();
    for (i, r) in records.into_iter().enumerate().filter(|(_, r)| r.split == split) {
        let image = load_image(&root.join(&r.image_path), Some(size))?;
        samples.push(Sample { image_id: i as u64, image, captions: r.captions, label: r.identity_id });
    }
    Ok(Dataset::new(samples))
}

/// Image paths by record index, for display.
pub fn image_paths(data: &Path) -> Result<Vec<String>> {
    let path = annotation_path(data);
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    Ok(parse_annotations(&text)?.into_iter().map(|r| r.image_path).collect())
}

//! Writes a generated synthetic dataset to disk.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sen_core::data::{generate_synthetic, AnnotationRecord, SyntheticImage, SyntheticSpec};

use crate::annotations::ANNOTATION_FILE;
use crate::error::{io_err, Error, Result};
use crate::images::save_png;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Provenance record stored next to the annotations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub generator: String,
    pub seed: u64,
    pub spec: SyntheticSpec,
    pub num_images: usize,
    pub num_captions: usize,
}

pub fn read_spec(path: &Path) -> Result<SyntheticSpec> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| Error::Json { path: path.to_path_buf(), source })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json { path: path.into(), source })?;
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

/// Renders the dataset into `out` and returns the generated images.
/// The same spec always produces byte-identical files.
pub fn write_synthetic(spec: &SyntheticSpec, out: &Path) -> Result<Vec<SyntheticImage>> {
    let images = generate_synthetic(spec)?;
    let img_dir = out.join("images");
    std::fs::create_dir_all(&img_dir).map_err(io_err(&img_dir))?;
    for s in &images {
        save_png(&s.image, &out.join(&s.record.image_path))?;
    }
    let records: Vec<&AnnotationRecord> = images.iter().map(|s| &s.record).collect();
    write_json(&out.join(ANNOTATION_FILE), &records)?;
    let manifest = Manifest {
        generator: format!("sen {}", env!("CARGO_PKG_VERSION")),
        seed: spec.seed,
        spec: spec.clone(),
        num_images: images.len(),
        num_captions: images.iter().map(|s| s.record.captions.len()).sum(),
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    log::info!("wrote {} images to {}", images.len(), out.display());
    Ok(images)
}

/// Every file under `dir`, sorted, relative to it.
pub fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
            let path = entry.map_err(io_err(dir))?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                out.push(path.strip_prefix(root).expect("under root").to_path_buf());
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}

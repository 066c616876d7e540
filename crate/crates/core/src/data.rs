//! Annotation records, in-memory datasets, the synthetic person generator
//! and identity-balanced batch sampling.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::ImageTensor;
use crate::error::{Error, Result};
use crate::rng::{seeded, substream, SenRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(Error::Config(format!("unknown split {other:?} (expected train, val or test)"))),
        }
    }
}

/// One image with its captions, in the CUHK-PEDES annotation layout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    #[serde(rename = "id")]
    pub identity_id: usize,
    #[serde(rename = "file_path")]
    pub image_path: String,
    pub captions: Vec<String>,
    pub split: Split,
}

/// Checks each record and remaps identities to `0..C` within every split,
/// in ascending order of the original ids.
pub fn remap_identities(mut records: Vec<AnnotationRecord>) -> Result<Vec<AnnotationRecord>> {
    for (i, r) in records.iter().enumerate() {
        if r.captions.is_empty() {
            return Err(Error::Config(format!("record {i}: no captions")));
        }
        if r.image_path.is_empty() {
            return Err(Error::Config(format!("record {i}: empty file_path")));
        }
    }
    for split in Split::ALL {
        let mut ids: Vec<usize> = records.iter().filter(|r| r.split == split).map(|r| r.identity_id).collect();
        ids.sort_unstable();
        ids.dedup();
        let map: BTreeMap<usize, usize> = ids.into_iter().enumerate().map(|(new, old)| (old, new)).collect();
        for r in records.iter_mut().filter(|r| r.split == split) {
            r.identity_id = map[&r.identity_id];
        }
    }
    Ok(records)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image_id: u64,
    pub image: ImageTensor,
    pub captions: Vec<String>,
    pub label: usize,
}

/// Images of one split with contiguous identity labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_identities(&self) -> usize {
        self.samples.iter().map(|s| s.label + 1).max().unwrap_or(0)
    }

    pub fn num_captions(&self) -> usize {
        self.samples.iter().map(|s| s.captions.len()).sum()
    }

    /// Every (sample, caption) pair, the unit of training and of text queries.
    pub fn pairs(&self) -> Vec<PairRef> {
        self.samples
            .iter()
            .enumerate()
            .flat_map(|(s, sm)| (0..sm.captions.len()).map(move |c| PairRef { sample: s, caption: c }))
            .collect()
    }

    pub fn caption(&self, pair: PairRef) -> &str {
        &self.samples[pair.sample].captions[pair.caption]
    }

    pub fn label(&self, pair: PairRef) -> usize {
        self.samples[pair.sample].label
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct PairRef {
    pub sample: usize,
    pub caption: usize,
}

// ---------------------------------------------------------------------------
// Synthetic people

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedColor {
    pub name: String,
    pub rgb: [f64; 3],
}

pub fn default_palette() -> Vec<NamedColor> {
    [
        ("red", [0.85, 0.12, 0.12]),
        ("blue", [0.12, 0.25, 0.85]),
        ("green", [0.12, 0.65, 0.2]),
        ("yellow", [0.95, 0.85, 0.15]),
        ("black", [0.06, 0.06, 0.06]),
        ("white", [0.95, 0.95, 0.95]),
        ("purple", [0.55, 0.15, 0.7]),
        ("orange", [0.95, 0.5, 0.08]),
    ]
    .into_iter()
    .map(|(name, rgb)| NamedColor { name: name.to_string(), rgb })
    .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Garment {
    Shirt,
    Pants,
    Shoes,
}

impl Garment {
    pub const ALL: [Garment; 3] = [Garment::Shirt, Garment::Pants, Garment::Shoes];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_identities: usize,
    pub images_per_identity: usize,
    #[serde(default = "two")]
    pub captions_per_image: usize,
    #[serde(default = "default_palette")]
    pub colors: Vec<NamedColor>,
    #[serde(default = "default_height")]
    pub image_height: usize,
    #[serde(default = "default_width")]
    pub image_width: usize,
    /// The last identities go to the test split, the ones before them to val.
    #[serde(default)]
    pub test_identities: usize,
    #[serde(default)]
    pub val_identities: usize,
    pub seed: u64,
}

fn two() -> usize {
    2
}
fn default_height() -> usize {
    64
}
fn default_width() -> usize {
    32
}

impl SyntheticSpec {
    pub fn new(num_identities: usize, images_per_identity: usize, seed: u64) -> Self {
        Self {
            num_identities,
            images_per_identity,
            captions_per_image: 2,
            colors: default_palette(),
            image_height: 64,
            image_width: 32,
            test_identities: 0,
            val_identities: 0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.colors.is_empty() {
            return Err(Error::Config("color vocabulary is empty".into()));
        }
        if self.num_identities == 0 || self.images_per_identity == 0 || self.captions_per_image == 0 {
            return Err(Error::Config("identity, image and caption counts must be positive".into()));
        }
        if self.image_height < 32 || self.image_width < 16 {
            return Err(Error::Config(format!("image {}x{} is too small to draw", self.image_height, self.image_width)));
        }
        if self.val_identities + self.test_identities > self.num_identities {
            return Err(Error::Config("more held-out identities than identities".into()));
        }
        let combos = self.colors.len().pow(3);
        if self.num_identities > combos {
            return Err(Error::Config(format!(
                "{} identities need distinct outfits but {} colors give only {combos}",
                self.num_identities,
                self.colors.len()
            )));
        }
        for c in &self.colors {
            if c.name.split_whitespace().count() != 1 || c.rgb.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Config(format!("bad color entry {:?}", c.name)));
            }
        }
        Ok(())
    }

    pub fn split_of(&self, identity: usize) -> Split {
        let train = self.num_identities - self.val_identities - self.test_identities;
        if identity < train {
            Split::Train
        } else if identity < train + self.val_identities {
            Split::Val
        } else {
            Split::Test
        }
    }
}

/// Color indices (into the palette) of shirt, pants and shoes.
pub type Outfit = [usize; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticImage {
    pub identity: usize,
    pub outfit: Outfit,
    pub record: AnnotationRecord,
    pub image: ImageTensor,
}

/// A rectangle `[top, bottom) × [left, right)` in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

const MAX_JITTER: i64 = 2;

/// Nominal garment rectangles for an `h×w` canvas before jitter.
fn body_layout(h: usize, w: usize) -> [(Option<Garment>, Rect); 4] {
    let r = |t: f64, b: f64, l: f64, rt: f64| Rect {
        top: (t * h as f64) as usize,
        bottom: (b * h as f64) as usize,
        left: (l * w as f64) as usize,
        right: (rt * w as f64) as usize,
    };
    [
        (None, r(0.04, 0.19, 0.34, 0.66)),
        (Some(Garment::Shirt), r(0.19, 0.5, 0.2, 0.8)),
        (Some(Garment::Pants), r(0.5, 0.84, 0.28, 0.72)),
        (Some(Garment::Shoes), r(0.84, 0.95, 0.24, 0.76)),
    ]
}

/// Pixels of a garment that remain inside it under any pose jitter.
pub fn garment_core(h: usize, w: usize, garment: Garment) -> Rect {
    let (_, r) = body_layout(h, w).into_iter().find(|(g, _)| *g == Some(garment)).expect("garment in layout");
    let j = MAX_JITTER as usize;
    Rect { top: r.top + j, bottom: r.bottom - j, left: r.left + j, right: r.right - j }
}

const SKIN: [f64; 3] = [0.9, 0.74, 0.6];

fn render(spec: &SyntheticSpec, outfit: &Outfit, rng: &mut SenRng) -> ImageTensor {
    let (h, w) = (spec.image_height, spec.image_width);
    let mut img = ImageTensor::filled(h, w, [0.0; 3]);
    let tint: [f64; 3] = [rng.random_range(0.3..0.6), rng.random_range(0.3..0.6), rng.random_range(0.3..0.6)];
    for y in 0..h {
        for x in 0..w {
            let n = rng.random_range(-0.12..0.12);
            img.set_pixel(y, x, [tint[0] + n, tint[1] + n, tint[2] + n]);
        }
    }
    let dy = rng.random_range(-MAX_JITTER..=MAX_JITTER);
    let dx = rng.random_range(-MAX_JITTER..=MAX_JITTER);
    let brightness = rng.random_range(-0.04..0.04);
    for (garment, rect) in body_layout(h, w) {
        let base = match garment {
            None => SKIN,
            Some(g) => spec.colors[outfit[g as usize]].rgb,
        };
        let shift = |v: usize, d: i64, max: usize| (v as i64 + d).clamp(0, max as i64) as usize;
        for y in shift(rect.top, dy, h)..shift(rect.bottom, dy, h) {
            for x in shift(rect.left, dx, w)..shift(rect.right, dx, w) {
                let n = rng.random_range(-0.03..0.03) + brightness;
                img.set_pixel(y, x, [base[0] + n, base[1] + n, base[2] + n]);
            }
        }
    }
    img
}

const SUBJECTS: [&str; 5] = ["person", "man", "woman", "pedestrian", "young person"];
const TOPS: [&str; 4] = ["shirt", "jacket", "t-shirt", "top"];
const BOTTOMS: [&str; 4] = ["pants", "trousers", "jeans", "shorts"];
const FEET: [&str; 3] = ["shoes", "sneakers", "boots"];

/// Templated caption naming the three garment colors in shirt, pants,
/// shoes order.
fn caption(colors: [&str; 3], rng: &mut SenRng) -> String {
    let s = SUBJECTS[rng.random_range(0..SUBJECTS.len())];
    let t = TOPS[rng.random_range(0..TOPS.len())];
    let b = BOTTOMS[rng.random_range(0..BOTTOMS.len())];
    let f = FEET[rng.random_range(0..FEET.len())];
    let [c1, c2, c3] = colors;
    match rng.random_range(0..5) {
        0 => format!("a {s} wearing a {c1} {t}, {c2} {b} and {c3} {f}."),
        1 => format!("the {s} is wearing a {c1} {t} with {c2} {b} and a pair of {c3} {f}."),
        2 => format!("this {s} has a {c1} {t} on, along with {c2} {b} and {c3} {f}."),
        3 => format!("a {s} in a {c1} {t} and {c2} {b} is walking in {c3} {f}."),
        _ => format!("{c1} {t}, {c2} {b}, {c3} {f}; the {s} is carrying nothing."),
    }
}

/// Distinct outfits, one per identity.
fn outfits(spec: &SyntheticSpec, rng: &mut SenRng) -> Vec<Outfit> {
    let n = spec.colors.len();
    let picks = rand::seq::index::sample(rng, n * n * n, spec.num_identities);
    picks.into_iter().map(|k| [k / (n * n), (k / n) % n, k % n]).collect()
}

/// Renders the whole dataset. Every identity's images share its outfit
/// and differ in pose, lighting and background. The same spec always gives
/// the same pixels and captions.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<SyntheticImage>> {
    spec.validate()?;
    let mut rng = seeded(spec.seed);
    let outfits = outfits(spec, &mut rng);
    let mut out = Vec::with_capacity(spec.num_identities * spec.images_per_identity);
    for (id, outfit) in outfits.iter().enumerate() {
        for k in 0..spec.images_per_identity {
            let mut img_rng = substream(spec.seed, (id * spec.images_per_identity + k) as u64 + 1);
            let image = render(spec, outfit, &mut img_rng);
            let names = [0, 1, 2].map(|g| spec.colors[outfit[g]].name.as_str());
            let captions = (0..spec.captions_per_image).map(|_| caption(names, &mut img_rng)).collect();
            out.push(SyntheticImage {
                identity: id,
                outfit: *outfit,
                record: AnnotationRecord {
                    identity_id: id,
                    image_path: format!("images/{id:04}_{k:02}.png"),
                    captions,
                    split: spec.split_of(id),
                },
                image,
            });
        }
    }
    Ok(out)
}

/// In-memory dataset of one split, straight from the generator.
pub fn synthetic_split(images: &[SyntheticImage], split: Split) -> Result<Dataset> {
    let records: Vec<AnnotationRecord> = images.iter().map(|s| s.record.clone()).collect();
    let remapped = remap_identities(records)?;
    let samples = images
        .iter()
        .zip(remapped)
        .enumerate()
        .filter(|(_, (_, r))| r.split == split)
        .map(|(i, (s, r))| Sample { image_id: i as u64, image: s.image.clone(), captions: r.captions, label: r.identity_id })
        .collect();
    Ok(Dataset::new(samples))
}

/// Palette color nearest (squared RGB distance) to the mean of `rect`.
pub fn dominant_color(image: &ImageTensor, rect: Rect, palette: &[NamedColor]) -> usize {
    let mut mean = [0.0; 3];
    let mut n = 0.0;
    for y in rect.top..rect.bottom {
        for x in rect.left..rect.right {
            let p = image.pixel(y, x);
            for c in 0..3 {
                mean[c] += p[c];
            }
            n += 1.0;
        }
    }
    let mean = mean.map(|v| v / n);
    let dist = |c: &NamedColor| (0..3).map(|i| (c.rgb[i] - mean[i]) * (c.rgb[i] - mean[i])).sum::<f64>();
    (0..palette.len()).min_by(|&a, &b| dist(&palette[a]).total_cmp(&dist(&palette[b]))).expect("non-empty palette")
}

/// Palette color words of `caption`, in order of appearance.
pub fn caption_colors(caption: &str, palette: &[NamedColor]) -> Vec<usize> {
    crate::encoders::split_words(caption)
        .iter()
        .filter_map(|w| palette.iter().position(|c| &c.name == w))
        .collect()
}

// ---------------------------------------------------------------------------
// Batching

/// Which (image, caption) pairs form one training batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub pairs: Vec<PairRef>,
    pub labels: Vec<usize>,
}

/// Identity-balanced sampling: each batch holds `B / K` identities with
/// `K` pairs each.
#[derive(Clone, Debug)]
pub struct PkSampler {
    by_identity: Vec<Vec<PairRef>>,
    batch_size: usize,
    instances: usize,
    order: Vec<usize>,
    cursor: usize,
    degenerate: bool,
    rng: SenRng,
}

impl PkSampler {
    pub fn new(dataset: &Dataset, batch_size: usize, instances: usize, seed: u64) -> Result<Self> {
        if batch_size < 2 {
            return Err(Error::Config(format!("batch size must be at least 2, got {batch_size}")));
        }
        if instances == 0 || !batch_size.is_multiple_of(instances) {
            return Err(Error::Config(format!("batch size {batch_size} is not a multiple of K = {instances}")));
        }
        let mut by_identity = vec![Vec::new(); dataset.num_identities()];
        for p in dataset.pairs() {
            by_identity[dataset.label(p)].push(p);
        }
        by_identity.retain(|v: &Vec<PairRef>| !v.is_empty());
        let ids = by_identity.len();
        let p = batch_size / instances;
        if ids == 0 {
            return Err(Error::Config("dataset has no caption pairs".into()));
        }
        let degenerate = ids == 1;
        if degenerate {
            log::warn!("dataset has a single identity: batches have no negatives and the triplet loss is zero");
        } else if ids < p {
            return Err(Error::Config(format!(
                "batch of {p} identities x {instances} instances needs {p} identities, dataset has {ids}"
            )));
        }
        Ok(Self {
            order: (0..ids).collect(),
            cursor: ids,
            by_identity,
            batch_size,
            instances,
            degenerate,
            rng: seeded(seed),
        })
    }

    pub fn identities_per_batch(&self) -> usize {
        if self.degenerate {
            1
        } else {
            self.batch_size / self.instances
        }
    }

    pub fn next_batch(&mut self) -> Batch {
        let p = self.identities_per_batch();
        let k = self.batch_size / p;
        let mut pairs = Vec::with_capacity(self.batch_size);
        let mut labels = Vec::with_capacity(self.batch_size);
        for _ in 0..p {
            if self.cursor >= self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let id = self.order[self.cursor];
            self.cursor += 1;
            let pool = &self.by_identity[id];
            let picks: Vec<PairRef> = if pool.len() >= k {
                rand::seq::index::sample(&mut self.rng, pool.len(), k).into_iter().map(|i| pool[i]).collect()
            } else {
                (0..k).map(|_| pool[self.rng.random_range(0..pool.len())]).collect()
            };
            for pr in picks {
                labels.push(id);
                pairs.push(pr);
            }
        }
        Batch { pairs, labels }
    }
}

impl Iterator for PkSampler {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        Some(self.next_batch())
    }
}

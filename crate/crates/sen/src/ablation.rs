//! Ablation sweeps over one configuration axis.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sen_core::config::ExperimentConfig;
use sen_core::data::Dataset;
use sen_core::losses::ComponentFlags;
use sen_core::retrieval::MetricsReport;
use sen_core::tir::DecoderVariant;
use sen_core::train::Trainer;

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    MaskRatio,
    DecoderDepth,
    DecoderVariant,
    Components,
}

impl Axis {
    pub const ALL: [Axis; 4] = [Axis::MaskRatio, Axis::DecoderDepth, Axis::DecoderVariant, Axis::Components];

    pub fn name(self) -> &'static str {
        match self {
            Axis::MaskRatio => "mask_ratio",
            Axis::DecoderDepth => "decoder_depth",
            Axis::DecoderVariant => "decoder_variant",
            Axis::Components => "components",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Axis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown axis `{s}`; expected one of mask_ratio, decoder_depth, decoder_variant, components"))
    }
}

/// The eight component rows: the baseline (SDM + ID) plus every tested
/// combination of CMT, masked-token recovery and restoration. The last row
/// is the full model.
pub fn component_rows() -> Vec<(&'static str, ComponentFlags)> {
    let row = |cmt, irr, tir| ComponentFlags { tir, cmt, irr, sdm: true, id: true };
    vec![
        ("Baseline", row(false, false, false)),
        ("CMT", row(true, false, false)),
        ("IRR", row(false, true, false)),
        ("TIR", row(false, false, true)),
        ("CMT+IRR", row(true, true, false)),
        ("IRR+TIR", row(false, true, true)),
        ("CMT+IRR+TIR", row(true, true, true)),
        ("SEN", row(true, false, true)),
    ]
}

pub const DEPTHS: [usize; 6] = [1, 2, 3, 4, 5, 6];

/// Named configurations of one sweep, derived from `base`. Axes that tune
/// the restoration branch switch it on.
pub fn cells(base: &ExperimentConfig, axis: Axis) -> Vec<(String, ExperimentConfig)> {
    let with_tir = || {
        let mut c = base.clone();
        c.components.tir = true;
        c
    };
    match axis {
        Axis::MaskRatio => (1..=9)
            .map(|i| {
                let mut c = with_tir();
                c.mask_ratio = i as f64 / 10.0;
                (format!("{:.1}", c.mask_ratio), c)
            })
            .collect(),
        Axis::DecoderDepth => DEPTHS
            .iter()
            .map(|&d| {
                let mut c = with_tir();
                c.decoder.depth = d;
                (d.to_string(), c)
            })
            .collect(),
        Axis::DecoderVariant => [("cross", DecoderVariant::Cross), ("fuse", DecoderVariant::Fuse), ("concat", DecoderVariant::Concat)]
            .into_iter()
            .map(|(name, v)| {
                let mut c = with_tir();
                c.decoder.variant = v;
                (name.to_string(), c)
            })
            .collect(),
        Axis::Components => component_rows()
            .into_iter()
            .map(|(name, flags)| {
                let mut c = base.clone();
                c.components = flags;
                (name.to_string(), c)
            })
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub name: String,
    pub per_seed: Vec<MetricsReport>,
    /// Mean over seeds.
    pub mean: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub axis: Axis,
    pub seeds: Vec<u64>,
    pub cells: Vec<Cell>,
}

impl AblationReport {
    pub fn cell(&self, name: &str) -> Option<&Cell> {
        self.cells.iter().find(|c| c.name == name)
    }

    /// One row per cell with the mean retrieval metrics in percent.
    pub fn table(&self) -> String {
        let width = self.cells.iter().map(|c| c.name.len()).max().unwrap_or(0).max(self.axis.name().len());
        let cols = ["Rank-1", "Rank-5", "Rank-10", "mAP", "mINP"];
        let mut out = format!("{:<width$}", self.axis.name());
        for c in cols {
            out += &format!("{c:>9}");
        }
        out.push('\n');
        for cell in &self.cells {
            let m = &cell.mean;
            out += &format!("{:<width$}", cell.name);
            for v in [m.rank1, m.rank5, m.rank10, m.map, m.minp] {
                out += &format!("{:>9.2}", v * 100.0);
            }
            out.push('\n');
        }
        out
    }
}

pub fn mean_report(reports: &[MetricsReport]) -> MetricsReport {
    let n = reports.len() as f64;
    let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    MetricsReport {
        rank1: avg(|m| m.rank1),
        rank5: avg(|m| m.rank5),
        rank10: avg(|m| m.rank10),
        map: avg(|m| m.map),
        minp: avg(|m| m.minp),
        ..reports[0].clone()
    }
}

/// Trains every cell once per seed on `train` and evaluates on `eval`.
/// `on_cell` sees each finished cell, for progress output.
pub fn run(
    base: &ExperimentConfig,
    axis: Axis,
    seeds: &[u64],
    train: &Dataset,
    eval: &Dataset,
    mut on_cell: impl FnMut(&Cell),
) -> Result<AblationReport> {
    assert!(!seeds.is_empty(), "at least one seed");
    let mut out = Vec::new();
    for (name, cfg) in cells(base, axis) {
        let mut per_seed = Vec::new();
        for &seed in seeds {
            let mut cfg = cfg.clone();
            cfg.seed = seed;
            let mut trainer = Trainer::from_dataset(cfg, train.clone())?;
            trainer.run(|_| {})?;
            per_seed.push(trainer.evaluate(eval)?);
        }
        let cell = Cell { name, mean: mean_report(&per_seed), per_seed };
        on_cell(&cell);
        out.push(cell);
    }
    Ok(AblationReport { axis, seeds: seeds.to_vec(), cells: out })
}

//! Desk-scale ablation grids: loss terms, descriptor subsets, projector
//! shapes and augmentation sets. Every cell pretrains from the same seed in
//! deterministic mode and is scored with the linear probe.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{linear_probe, ProbeResult};
use crate::config::{ExperimentConfig, TrainMode};
use crate::data::Splits;
use crate::descriptors::DescriptorSpec;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::real::{DType, Real};
use crate::train::train;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub label: String,
    pub top1: f64,
    pub top5: f64,
    /// Mean per-dimension std of z̃ over the last optimizer step.
    pub final_std_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub name: String,
    pub title: String,
    pub rows: Vec<CellResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub digest: String,
    pub pretrain_epochs: usize,
    pub probe_epochs: usize,
    /// Probe on a randomly initialized, untrained encoder.
    pub random_encoder: ProbeResult,
    pub grids: Vec<GridReport>,
}

/// One named configuration of a grid.
pub type Cell = (String, ExperimentConfig);

const LOSS_ROWS: [(&str, bool, bool, bool); 7] = [
    ("L1", true, false, false),
    ("L2", false, true, false),
    ("L3", false, false, true),
    ("L1+L2", true, true, false),
    ("L1+L3", true, false, true),
    ("L2+L3", false, true, true),
    ("L1+L2+L3", true, true, true),
];

/// The seven single/pair/triple loss combinations.
pub fn loss_grid(base: &ExperimentConfig) -> Vec<Cell> {
    LOSS_ROWS
        .iter()
        .map(|&(label, l1, l2, l3)| {
            let mut c = base.clone();
            if !l1 {
                c.loss.lambda = 0.0;
                c.loss.mu = 0.0;
            }
            if !l2 {
                c.loss.alpha = 0.0;
            }
            if !l3 {
                c.descriptors.clear();
            }
            (label.to_string(), c)
        })
        .collect()
}

fn descriptor_label(d: &DescriptorSpec) -> &'static str {
    match d {
        DescriptorSpec::FlattenOriginal { .. } => "original",
        DescriptorSpec::Scattering { .. } => "scatnet",
        DescriptorSpec::FlattenAugmented { .. } => "augmented",
        DescriptorSpec::Hog { .. } => "hog",
        DescriptorSpec::Lsd { .. } => "lsd",
    }
}

/// Every non-empty subset of the configured descriptors, smallest first.
pub fn descriptor_grid(base: &ExperimentConfig) -> Vec<Cell> {
    let all = &base.descriptors;
    let n = all.len().min(16);
    let mut masks: Vec<u32> = (1..(1u32 << n)).collect();
    masks.sort_by_key(|m| (m.count_ones(), (0..n).map(|i| (m >> i) & 1 == 0).collect::<Vec<_>>()));
    masks
        .into_iter()
        .map(|m| {
            let subset: Vec<DescriptorSpec> = (0..n).filter(|i| (m >> i) & 1 == 1).map(|i| all[i].clone()).collect();
            let label = subset.iter().map(descriptor_label).collect::<Vec<_>>().join("+");
            let mut c = base.clone();
            c.descriptors = subset;
            (label, c)
        })
        .collect()
}

/// Desk projector widths × depths 3, 2, 1, then no projector.
pub fn projector_grid(base: &ExperimentConfig) -> Vec<Cell> {
    let mut cells = Vec::new();
    for depth in [3usize, 2, 1] {
        for width in [256usize, 128, 64, 32] {
            let mut c = base.clone();
            c.projector.widths = vec![width; depth];
            let label = vec![width.to_string(); depth].join("-");
            cells.push((label, c));
        }
    }
    let mut c = base.clone();
    c.projector.widths.clear();
    cells.push(("without projector".into(), c));
    cells
}

/// Cumulative augmentation sets: crop, +flip, +color, +grayscale, +blur.
pub fn augment_grid(base: &ExperimentConfig) -> Vec<Cell> {
    let names = ["crop", "flip", "color", "grayscale", "blur"];
    (1..=names.len())
        .map(|k| {
            let mut c = base.clone();
            let a = &mut c.augment;
            if k < 2 {
                a.flip_p = 0.0;
            }
            if k < 3 {
                a.jitter_p = 0.0;
            }
            if k < 4 {
                a.grayscale_p = 0.0;
            }
            if k < 5 {
                a.blur_p = 0.0;
            }
            (names[..k].join("+"), c)
        })
        .collect()
}

pub fn grid_cells(name: &str, base: &ExperimentConfig) -> Result<(String, Vec<Cell>)> {
    Ok(match name {
        "loss" => ("Loss-term combinations".into(), loss_grid(base)),
        "descriptors" => ("Descriptor subsets for the dependence term".into(), descriptor_grid(base)),
        "projector" => ("Projector shape".into(), projector_grid(base)),
        "augment" => ("Augmentation sets".into(), augment_grid(base)),
        other => return Err(Error::Config(format!("unknown ablation grid `{other}`"))),
    })
}

fn run_cell_t<T: Real>(cfg: &ExperimentConfig, splits: &Splits) -> Result<(ProbeResult, f64)> {
    let (model, metrics) = train::<T>(cfg, &splits.pretrain, None, None)?;
    let p = linear_probe(&model, &splits.train, &splits.test, &cfg.eval, cfg.train.seed)?;
    Ok((p, metrics.last().map_or(f64::NAN, |m| m.emb_std_mean)))
}

/// Pretrains one configuration and probes it.
pub fn run_cell(cfg: &ExperimentConfig, splits: &Splits) -> Result<(ProbeResult, f64)> {
    match cfg.train.dtype {
        DType::F32 => run_cell_t::<f32>(cfg, splits),
        DType::F64 => run_cell_t::<f64>(cfg, splits),
    }
}

fn random_probe_t<T: Real>(cfg: &ExperimentConfig, splits: &Splits) -> Result<ProbeResult> {
    let model = Model::<T>::new(&cfg.model, &cfg.projector, splits.pretrain.image_dims(), cfg.train.seed)?;
    linear_probe(&model, &splits.train, &splits.test, &cfg.eval, cfg.train.seed)
}

/// Probe of the untrained encoder a run starts from.
pub fn random_encoder_probe(cfg: &ExperimentConfig, splits: &Splits) -> Result<ProbeResult> {
    match cfg.train.dtype {
        DType::F32 => random_probe_t::<f32>(cfg, splits),
        DType::F64 => random_probe_t::<f64>(cfg, splits),
    }
}

/// Runs the grids named in `base.eval.grids`, each cell for
/// `base.eval.ablation_epochs` pretraining epochs.
pub fn ablation_report(base: &ExperimentConfig, splits: &Splits) -> Result<AblationReport> {
    base.validate()?;
    let mut b = base.clone();
    b.train.mode = TrainMode::Ssl;
    b.train.epochs = base.eval.ablation_epochs;
    b.train.deterministic = true;
    let random_encoder = random_encoder_probe(&b, splits)?;
    let mut grids = Vec::new();
    for name in &base.eval.grids {
        let (title, cells) = grid_cells(name, &b)?;
        log::info!("ablation grid `{name}`: {} cells", cells.len());
        let rows = cells
            .par_iter()
            .map(|(label, cfg)| {
                let (p, std) = run_cell(cfg, splits)?;
                log::info!("  {name} / {label}: top1 {:.2}", 100.0 * p.top1);
                Ok(CellResult {
                    label: label.clone(),
                    top1: p.top1,
                    top5: p.top5,
                    final_std_mean: std,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        grids.push(GridReport {
            name: name.clone(),
            title,
            rows,
        });
    }
    Ok(AblationReport {
        seed: b.train.seed,
        digest: base.digest(),
        pretrain_epochs: b.train.epochs,
        probe_epochs: b.eval.epochs,
        random_encoder,
        grids,
    })
}

pub fn render_markdown(r: &AblationReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Ablation report\n");
    let _ = writeln!(
        out,
        "seed {}, config digest `{}`, {} pretraining epochs per cell, {} probe epochs.\n",
        r.seed, r.digest, r.pretrain_epochs, r.probe_epochs
    );
    let _ = writeln!(
        out,
        "Random frozen encoder: top-1 {:.2}, top-5 {:.2}.\n",
        100.0 * r.random_encoder.top1,
        100.0 * r.random_encoder.top5
    );
    for g in &r.grids {
        let _ = writeln!(out, "## {}\n", g.title);
        let _ = writeln!(out, "| setting | top-1 | top-5 | final std |");
        let _ = writeln!(out, "|---|---:|---:|---:|");
        for c in &g.rows {
            let _ = writeln!(
                out,
                "| {} | {:.2} | {:.2} | {:.3} |",
                c.label,
                100.0 * c.top1,
                100.0 * c.top5,
                c.final_std_mean
            );
        }
        out.push('\n');
    }
    out
}

/// Writes `report.json` and `report.md` into `dir`.
pub fn write_report(dir: &Path, r: &AblationReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(r).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(dir.join("report.json"), json + "\n")?;
    std::fs::write(dir.join("report.md"), render_markdown(r))?;
    Ok(())
}

//! Linear probing, top-k accuracy and embedding diagnostics.

pub mod report;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::{EvalConfig, ProbeFeatures};
use crate::data::Dataset;
use crate::depmeasure::dcor_stat;
use crate::error::{Error, Result};
use crate::model::{Model, Param};
use crate::real::Real;
use crate::rng::stream;
use crate::train::{adam_step, AdamConfig, AdamState};

pub use report::{ablation_report, write_report, AblationReport, CellResult, GridReport};

/// Fraction of rows whose label ranks among the `k` largest logits. Equal
/// logits rank by class index, lowest first.
pub fn topk_accuracy(logits: ArrayView2<'_, f64>, labels: &[usize], k: usize) -> Result<f64> {
    if logits.nrows() != labels.len() {
        return Err(Error::shape("topk_accuracy", &[logits.nrows()], &[labels.len()]));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let c = logits.ncols();
    let mut hits = 0usize;
    for (row, &y) in logits.outer_iter().zip(labels) {
        if y >= c {
            return Err(Error::Data(format!("label {y} outside {c} logit columns")));
        }
        let ly = row[y];
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(j, &v)| v > ly || (v == ly && j < y))
            .count();
        if rank < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub standardize: bool,
    pub seed: u64,
}

impl ProbeConfig {
    pub fn from_eval(e: &EvalConfig, seed: u64) -> Self {
        ProbeConfig {
            epochs: e.epochs,
            lr: e.lr,
            batch_size: e.batch_size,
            standardize: e.standardize,
            seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub top1: f64,
    pub top5: f64,
    pub train_top1: f64,
}

/// A trained linear classifier `x·W + b` on (optionally standardized) features.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    pub mean: Array1<f64>,
    pub scale: Array1<f64>,
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl LinearProbe {
    pub fn logits(&self, x: ArrayView2<'_, f32>) -> Array2<f64> {
        let xs = (x.mapv(f64::from) - &self.mean) / &self.scale;
        xs.dot(&self.w) + &self.b
    }
}

fn check_labels(name: &str, x: &Array2<f32>, labels: &[usize], classes: usize) -> Result<()> {
    if x.nrows() != labels.len() {
        return Err(Error::Data(format!("{name}: {} feature rows for {} labels", x.nrows(), labels.len())));
    }
    if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
        return Err(Error::Data(format!("{name}: label {y} of sample {i} exceeds {classes} classes")));
    }
    Ok(())
}

/// Fits a softmax-regression probe with Adam on cross-entropy.
pub fn fit_probe(x: &Array2<f32>, labels: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<LinearProbe> {
    check_labels("probe train", x, labels, classes)?;
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("probe needs epochs >= 1, batch_size >= 1 and lr > 0".into()));
    }
    let (n, f) = x.dim();
    let xf = x.mapv(f64::from);
    let (mean, scale) = if cfg.standardize && n > 0 {
        let mean = xf.mean_axis(Axis(0)).expect("non-empty");
        let sd = xf.std_axis(Axis(0), 0.0).mapv(|v| if v > 1e-8 { v } else { 1.0 });
        (mean, sd)
    } else {
        (Array1::zeros(f), Array1::ones(f))
    };
    let xs = (&xf - &mean) / &scale;
    let mut params = vec![
        Param {
            name: "probe.weight".into(),
            shape: vec![f, classes],
            data: vec![0.0f64; f * classes],
        },
        Param {
            name: "probe.bias".into(),
            shape: vec![classes],
            data: vec![0.0f64; classes],
        },
    ];
    let mut state = AdamState::new(&params);
    let adam = AdamConfig {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut stream(cfg.seed, "probe", &[epoch as u64]));
        for chunk in order.chunks(cfg.batch_size) {
            let xb = xs.select(Axis(0), chunk);
            let w = ArrayView2::from_shape((f, classes), &params[0].data).expect("shape");
            let b = Array1::from(params[1].data.clone());
            let mut p = xb.dot(&w) + &b;
            for mut row in p.outer_iter_mut() {
                let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
                row.mapv_inplace(|v| (v - m).exp());
                let z = row.sum();
                row /= z;
            }
            for (r, &i) in chunk.iter().enumerate() {
                p[[r, labels[i]]] -= 1.0;
            }
            p /= chunk.len() as f64;
            let gw = xb.t().dot(&p);
            let gb = p.sum_axis(Axis(0));
            let grads = vec![gw.iter().copied().collect(), gb.to_vec()];
            adam_step(&mut params, &grads, &mut state, cfg.lr, &adam)?;
        }
    }
    Ok(LinearProbe {
        mean,
        scale,
        w: Array2::from_shape_vec((f, classes), params[0].data.clone()).expect("shape"),
        b: Array1::from(params[1].data.clone()),
    })
}

/// Probe accuracy on held-out features.
pub fn probe_features(
    train_x: &Array2<f32>,
    train_y: &[usize],
    test_x: &Array2<f32>,
    test_y: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    check_labels("probe test", test_x, test_y, classes)?;
    if train_x.ncols() != test_x.ncols() {
        return Err(Error::shape("probe features", &[train_x.ncols()], &[test_x.ncols()]));
    }
    let probe = fit_probe(train_x, train_y, classes, cfg)?;
    let lt = probe.logits(test_x.view());
    let ltr = probe.logits(train_x.view());
    Ok(ProbeResult {
        top1: topk_accuracy(lt.view(), test_y, 1)?,
        top5: topk_accuracy(lt.view(), test_y, 5)?,
        train_top1: topk_accuracy(ltr.view(), train_y, 1)?,
    })
}

fn labels_of(d: &Dataset, name: &str) -> Result<Vec<usize>> {
    d.labels.clone().ok_or_else(|| Error::Data(format!("{name} split has no labels")))
}

/// Frozen features for a whole dataset.
pub fn features<T: Real>(model: &Model<T>, data: &Dataset, which: ProbeFeatures) -> Result<Array2<f32>> {
    model.embed(&data.images, which == ProbeFeatures::Projector)
}

/// Freezes `model` (eval mode, no parameter or running-stat change) and
/// probes its features on the labeled splits.
pub fn linear_probe<T: Real>(
    model: &Model<T>,
    train: &Dataset,
    test: &Dataset,
    eval: &EvalConfig,
    seed: u64,
) -> Result<ProbeResult> {
    if train.classes != test.classes {
        return Err(Error::Data(format!(
            "class count mismatch: train has {}, test has {}",
            train.classes, test.classes
        )));
    }
    let (ytr, yte) = (labels_of(train, "train")?, labels_of(test, "test")?);
    let before = model.checksum();
    let ftr = features(model, train, eval.features)?;
    let fte = features(model, test, eval.features)?;
    debug_assert_eq!(before, model.checksum());
    probe_features(&ftr, &ytr, &fte, &yte, train.classes, &ProbeConfig::from_eval(eval, seed))
}

/// Raw-pixel baseline: the probe on flattened images.
pub fn pixel_probe(train: &Dataset, test: &Dataset, eval: &EvalConfig, seed: u64) -> Result<ProbeResult> {
    let flat = |d: &Dataset| {
        let n = d.len();
        d.images.to_shape((n, d.images.len() / n.max(1))).map(|v| v.to_owned())
    };
    let (ftr, fte) = (
        flat(train).map_err(|e| Error::Data(e.to_string()))?,
        flat(test).map_err(|e| Error::Data(e.to_string()))?,
    );
    let (ytr, yte) = (labels_of(train, "train")?, labels_of(test, "test")?);
    probe_features(&ftr, &ytr, &fte, &yte, train.classes, &ProbeConfig::from_eval(eval, seed))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingStats {
    pub std: Vec<f64>,
    pub std_min: f64,
    pub std_mean: f64,
    /// `dcor_stat(embedding, descriptor)` per named descriptor.
    pub dcor: Vec<(String, f64)>,
}

/// Per-dimension spread of `emb` and its dependence on each descriptor.
pub fn embedding_stats(emb: &Array2<f32>, descriptors: &[(String, Array2<f32>)]) -> Result<EmbeddingStats> {
    if emb.nrows() == 0 || emb.ncols() == 0 {
        return Err(Error::Data("embedding_stats needs a non-empty matrix".into()));
    }
    let e = emb.mapv(f64::from);
    let std = e.std_axis(Axis(0), 0.0).to_vec();
    let std_min = std.iter().copied().fold(f64::INFINITY, f64::min);
    let std_mean = std.iter().sum::<f64>() / std.len() as f64;
    let dcor = descriptors
        .iter()
        .map(|(name, d)| Ok((name.clone(), dcor_stat(e.view(), d.mapv(f64::from).view())?.dcor)))
        .collect::<Result<Vec<_>>>()?;
    Ok(EmbeddingStats {
        std,
        std_min,
        std_mean,
        dcor,
    })
}

#[cfg(test)]
mod tests;

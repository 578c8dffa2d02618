//! Pretraining and distillation loops.
//!
//! Each micro-batch pairs the resized original view `x` with an augmented view
//! `x̃`, embeds both through encoder and projector, and backpropagates the full
//! objective against the descriptor targets (or teacher rows). Gradients are
//! summed over `accumulation` micro-batches before each Adam step; a partial
//! accumulation is flushed at the end of every epoch.

pub mod metrics;
pub mod optim;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::time::Instant;

use ndarray::{Array2, Array4, Axis};
use rayon::prelude::*;

use crate::augment::augment;
use crate::config::{ExperimentConfig, TrainMode};
use crate::data::{batch_indices, read_matrix, Dataset};
use crate::descriptors::DescriptorBank;
use crate::error::{Error, Result};
use crate::image::ImageBatch;
use crate::losses::{total_loss, LossBreakdown, Target};
use crate::model::{Checkpoint, Model};
use crate::real::Real;
use crate::rng::stream;
use crate::tensor::Tensor;

pub use metrics::{read_metrics, MetricRecord, MetricsWriter};
pub use optim::{adam_step, cosine_lr, AdamConfig, AdamState};

pub const AUGMENT_STREAM: &str = "augment";

/// Teacher embeddings; row `i` belongs to dataset sample `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherSource {
    pub rows: Array2<f32>,
}

impl TeacherSource {
    pub fn new(rows: Array2<f32>) -> Result<Self> {
        if rows.ncols() == 0 {
            return Err(Error::Data("teacher embeddings have zero columns".into()));
        }
        Ok(TeacherSource { rows })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(read_matrix(path)?)
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn rows_for(&self, indices: &[usize]) -> Result<Array2<f32>> {
        if let Some(&i) = indices.iter().find(|&&i| i >= self.rows.nrows()) {
            return Err(Error::Data(format!(
                "no teacher row for dataset index {i} (teacher has {} rows)",
                self.rows.nrows()
            )));
        }
        Ok(self.rows.select(Axis(0), indices))
    }
}

/// Everything one micro-batch needs, in plain arrays so it can be prepared on
/// another thread.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub epoch: usize,
    pub indices: Vec<usize>,
    pub x: Array4<f32>,
    pub xt: Array4<f32>,
    /// `(name, β, B×D_k values)`.
    pub targets: Vec<(String, f64, Array2<f32>)>,
}

/// Augmented views of a batch, one keyed stream per `(epoch, dataset index)`.
pub fn augment_batch(batch: &ImageBatch, config: &ExperimentConfig, epoch: usize) -> Array4<f32> {
    let seed = config.train.seed;
    let views: Vec<_> = (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, AUGMENT_STREAM, &[epoch as u64, batch.provenance[i].index as u64]);
            augment(batch.image(i), &config.augment, &mut rng)
        })
        .collect();
    let (_, h, w) = views.first().map(|v| v.dim()).unwrap_or((0, 0, 0));
    let mut out = Array4::zeros((views.len(), batch.image_dims().0, h, w));
    for (i, v) in views.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(v);
    }
    out
}

fn unique_names(kinds: &[&str]) -> Vec<String> {
    kinds
        .iter()
        .enumerate()
        .map(|(i, k)| {
            let repeats = kinds.iter().filter(|o| *o == k).count();
            if repeats > 1 {
                format!("{k}_{}", kinds[..i].iter().filter(|o| *o == k).count() + 1)
            } else {
                k.to_string()
            }
        })
        .collect()
}

/// Read-only side of training: dataset, descriptor bank and caches.
pub struct BatchSource<'a> {
    pub config: &'a ExperimentConfig,
    pub data: &'a Dataset,
    bank: DescriptorBank,
    names: Vec<String>,
    cache: Vec<Option<Array2<f32>>>,
    teacher: Option<&'a TeacherSource>,
}

impl<'a> BatchSource<'a> {
    pub fn new(config: &'a ExperimentConfig, data: &'a Dataset, teacher: Option<&'a TeacherSource>) -> Result<Self> {
        let distill = config.train.mode == TrainMode::Distill;
        if distill && teacher.is_none() {
            return Err(Error::Config("distill mode needs teacher embeddings".into()));
        }
        let specs = if distill && !config.train.teacher.mix_descriptors {
            Vec::new()
        } else {
            config.descriptors.clone()
        };
        let bank = DescriptorBank::new(&specs, data.image_dims(), &config.augment)?;
        let kinds: Vec<&str> = specs.iter().map(|s| s.kind()).collect();
        let names = unique_names(&kinds);
        let all = data.all();
        let cache = specs
            .iter()
            .enumerate()
            .map(|(k, s)| {
                if s.is_stochastic() {
                    Ok(None)
                } else {
                    bank.extract_batch(k, &all, config.train.seed, 0).map(|o| Some(o.values))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BatchSource {
            config,
            data,
            bank,
            names,
            cache,
            teacher: if distill { teacher } else { None },
        })
    }

    /// Descriptor target names in loss order (teacher last).
    pub fn target_names(&self) -> Vec<String> {
        let mut n = self.names.clone();
        if self.teacher.is_some() {
            n.push("teacher".into());
        }
        n
    }

    /// Micro-batch of dataset samples.
    pub fn prepare(&self, epoch: usize, indices: &[usize]) -> Result<Prepared> {
        let batch = self.data.gather(indices);
        let mut targets = Vec::with_capacity(self.names.len() + 1);
        for (k, name) in self.names.iter().enumerate() {
            let values = match &self.cache[k] {
                Some(all) => all.select(Axis(0), indices),
                None => self.bank.extract_batch(k, &batch, self.config.train.seed, epoch as u64)?.values,
            };
            targets.push((name.clone(), self.bank.specs()[k].weight(), values));
        }
        if let Some(t) = self.teacher {
            targets.push(("teacher".into(), self.config.train.teacher.weight, t.rows_for(indices)?));
        }
        Ok(Prepared {
            epoch,
            indices: indices.to_vec(),
            xt: augment_batch(&batch, self.config, epoch),
            x: batch.pixels,
            targets,
        })
    }

    /// Micro-batch from arbitrary images; descriptors are computed directly and
    /// `teacher_rows`, when given, replace (or join) them as in distill mode.
    pub fn prepare_images(&self, batch: &ImageBatch, epoch: usize, teacher_rows: Option<&Array2<f32>>) -> Result<Prepared> {
        let mut targets = Vec::new();
        for (k, name) in self.names.iter().enumerate() {
            let out = self.bank.extract_batch(k, batch, self.config.train.seed, epoch as u64)?;
            targets.push((name.clone(), self.bank.specs()[k].weight(), out.values));
        }
        if let Some(rows) = teacher_rows {
            if rows.nrows() != batch.len() {
                return Err(Error::Data(format!("{} teacher rows for a batch of {}", rows.nrows(), batch.len())));
            }
            targets.push(("teacher".into(), self.config.train.teacher.weight, rows.clone()));
        }
        Ok(Prepared {
            epoch,
            indices: batch.provenance.iter().map(|p| p.index).collect(),
            xt: augment_batch(batch, self.config, epoch),
            x: batch.pixels.clone(),
            targets,
        })
    }

    pub fn epoch_batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        let t = &self.config.train;
        batch_indices(self.data.len(), t.batch_size, t.seed, epoch as u64, self.config.data.drop_last)
    }
}

fn to_tensor<T: Real>(a: &Array2<f32>) -> Result<Tensor<T>> {
    Tensor::new(a.iter().map(|&v| T::of(v as f64)).collect(), &[a.nrows(), a.ncols()])
}

/// Population std of every column of a `B×D` tensor: `(min, mean)`.
fn column_std<T: Real>(z: &Tensor<T>) -> (f64, f64) {
    let (b, d) = (z.shape()[0], z.shape()[1]);
    let data = z.data();
    let mut min = f64::INFINITY;
    let mut sum = 0.0;
    for j in 0..d {
        let mean = (0..b).map(|i| data[i * d + j].f64()).sum::<f64>() / b as f64;
        let var = (0..b).map(|i| (data[i * d + j].f64() - mean).powi(2)).sum::<f64>() / b as f64;
        let s = var.sqrt();
        min = min.min(s);
        sum += s;
    }
    (min, sum / d as f64)
}

/// Mutable side of training: model, optimizer and gradient accumulator.
pub struct Learner<T: Real> {
    pub model: Model<T>,
    pub adam: AdamState<T>,
    pub config: ExperimentConfig,
    grads: Vec<Vec<T>>,
    pending: Vec<(LossBreakdown, f64, f64)>,
    pub step: u64,
    pub total_steps: u64,
    pub metrics: Vec<MetricRecord>,
    start: Instant,
}

impl<T: Real> Learner<T> {
    pub fn new(model: Model<T>, config: &ExperimentConfig, total_steps: u64) -> Self {
        let grads = model.params().iter().map(|p| vec![T::zero(); p.data.len()]).collect();
        Learner {
            adam: AdamState::new(model.params()),
            model,
            config: config.clone(),
            grads,
            pending: Vec::new(),
            step: 0,
            total_steps,
            metrics: Vec::new(),
            start: Instant::now(),
        }
    }

    /// Gradient summed over the micro-batches since the last optimizer step.
    pub fn accumulated(&self) -> &[Vec<T>] {
        &self.grads
    }

    /// Forward, backward and accumulation for one micro-batch. Returns the
    /// breakdown and whether an optimizer step was taken.
    pub fn micro_step(&mut self, prep: &Prepared) -> Result<(LossBreakdown, Option<MetricRecord>)> {
        let bd = self.accumulate(prep)?;
        let rec = if self.pending.len() >= self.config.train.accumulation {
            Some(self.optimizer_step(prep.epoch)?)
        } else {
            None
        };
        Ok((bd, rec))
    }

    /// Forward and backward only; gradients are added to the accumulator.
    pub fn accumulate(&mut self, prep: &Prepared) -> Result<LossBreakdown> {
        if prep.x.iter().all(|&v| v == prep.x[[0, 0, 0, 0]]) || prep.x.outer_iter().all(|img| img == prep.x.index_axis(Axis(0), 0)) {
            log::warn!("degenerate micro-batch at epoch {}: all images identical", prep.epoch);
        }
        let p = self.model.bind(true);
        let x = self.model.pixels_tensor(&prep.x)?;
        let xt = self.model.pixels_tensor(&prep.xt)?;
        let e = self.model.encode(&p, &x)?;
        let z = self.model.project(&p, &e)?;
        let et = self.model.encode(&p, &xt)?;
        let zt = self.model.project(&p, &et)?;
        let targets = prep
            .targets
            .iter()
            .map(|(name, beta, v)| Ok(Target::new(name.clone(), &to_tensor::<T>(v)?, *beta)))
            .collect::<Result<Vec<_>>>()?;
        let (loss, bd) = total_loss(&z, &zt, &targets, &self.config.loss)?;
        if !loss.item().is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {} at step {} (epoch {})",
                loss.item(),
                self.step,
                prep.epoch
            )));
        }
        let g = loss.backward()?;
        for (acc, t) in self.grads.iter_mut().zip(&p.tensors) {
            if g.contains(t) {
                for (a, v) in acc.iter_mut().zip(g.get(t)) {
                    *a += v;
                }
            }
        }
        let (smin, smean) = column_std(&zt);
        self.pending.push((bd.clone(), smin, smean));
        Ok(bd)
    }

    pub fn has_pending(&self) -> bool {
        !self.pending.is_empty()
    }

    /// Adam update with the accumulated gradient; records one metrics entry.
    pub fn optimizer_step(&mut self, epoch: usize) -> Result<MetricRecord> {
        let t = &self.config.train;
        let lr = cosine_lr(self.step, self.total_steps, t.lr);
        let cfg = AdamConfig {
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.adam_eps,
        };
        adam_step(self.model.params_mut(), &self.grads, &mut self.adam, lr, &cfg)?;
        let n = self.pending.len().max(1) as f64;
        let mean = |f: &dyn Fn(&(LossBreakdown, f64, f64)) -> f64| self.pending.iter().map(f).sum::<f64>() / n;
        let mut desc = BTreeMap::new();
        if let Some((first, _, _)) = self.pending.first() {
            for (k, (name, _)) in first.dcor_desc.iter().enumerate() {
                desc.insert(name.clone(), mean(&|p| p.0.dcor_desc[k].1));
            }
        }
        let rec = MetricRecord {
            step: self.step,
            epoch,
            lr,
            loss_total: mean(&|p| p.0.total),
            loss_mse: mean(&|p| p.0.mse),
            loss_var_z: mean(&|p| p.0.var_z),
            loss_var_zt: mean(&|p| p.0.var_zt),
            loss_dcor_zz: mean(&|p| p.0.dcor_zz),
            loss_dcor_desc: desc,
            emb_std_min: mean(&|p| p.1),
            emb_std_mean: mean(&|p| p.2),
            seconds: if t.deterministic { 0.0 } else { self.start.elapsed().as_secs_f64() },
        };
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
        self.pending.clear();
        self.step += 1;
        self.metrics.push(rec.clone());
        Ok(rec)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = self.model.to_checkpoint();
        c.digest = self.config.digest();
        c.config = self.config.to_toml();
        c.optimizer = Some(self.adam.to_checkpoint(self.model.params()));
        c
    }
}

/// Optimizer steps in a run: every epoch flushes its partial accumulation.
pub fn total_steps(config: &ExperimentConfig, n: usize) -> u64 {
    let t = &config.train;
    let batches = if config.data.drop_last {
        n / t.batch_size
    } else {
        n.div_ceil(t.batch_size)
    };
    (t.epochs * batches.div_ceil(t.accumulation)) as u64
}

/// Fresh model for a configuration and dataset.
pub fn init_model<T: Real>(config: &ExperimentConfig, data: &Dataset) -> Result<Model<T>> {
    Model::new(&config.model, &config.projector, data.image_dims(), config.train.seed)
}

pub struct Trainer<'a, T: Real> {
    pub source: BatchSource<'a>,
    pub learner: Learner<T>,
}

/// Files written into a run directory.
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "last.mvck";

impl<'a, T: Real> Trainer<'a, T> {
    pub fn new(config: &'a ExperimentConfig, data: &'a Dataset, teacher: Option<&'a TeacherSource>) -> Result<Self> {
        config.validate()?;
        if T::DTYPE != config.train.dtype {
            return Err(Error::Config(format!(
                "trainer instantiated for {:?} but train.dtype is {:?}",
                T::DTYPE,
                config.train.dtype
            )));
        }
        let source = BatchSource::new(config, data, teacher)?;
        let model = init_model::<T>(config, data)?;
        let learner = Learner::new(model, config, total_steps(config, data.len()));
        Ok(Trainer { source, learner })
    }

    /// One SSL micro-step on an arbitrary batch.
    pub fn ssl_step(&mut self, batch: &ImageBatch, epoch: usize) -> Result<LossBreakdown> {
        let prep = self.source.prepare_images(batch, epoch, None)?;
        Ok(self.learner.micro_step(&prep)?.0)
    }

    /// One distillation micro-step; `teacher_rows` align with the batch.
    pub fn distill_step(&mut self, batch: &ImageBatch, teacher_rows: &Array2<f32>, epoch: usize) -> Result<LossBreakdown> {
        let prep = self.source.prepare_images(batch, epoch, Some(teacher_rows))?;
        Ok(self.learner.micro_step(&prep)?.0)
    }

    /// Runs every epoch. With `out_dir`, metrics stream to `metrics.jsonl` and
    /// `last.mvck` is rewritten at each checkpoint interval and at the end.
    pub fn run(&mut self, out_dir: Option<&Path>) -> Result<()> {
        let mut writer = match out_dir {
            Some(d) => Some(MetricsWriter::create(d.join(METRICS_FILE))?),
            None => None,
        };
        let epochs = self.source.config.train.epochs;
        let plan: Vec<(usize, Vec<usize>)> = (0..epochs)
            .flat_map(|e| self.source.epoch_batches(e).into_iter().map(move |b| (e, b)))
            .collect();
        let t = &self.source.config.train;
        let serial = t.deterministic || t.prefetch == 0;
        let source = &self.source;
        let learner = &mut self.learner;
        let mut consume = |prep: Prepared, next_epoch: Option<usize>| -> Result<()> {
            let (_, rec) = learner.micro_step(&prep)?;
            let mut recs: Vec<MetricRecord> = rec.into_iter().collect();
            let epoch_done = next_epoch != Some(prep.epoch);
            if epoch_done && learner.has_pending() {
                recs.push(learner.optimizer_step(prep.epoch)?);
            }
            if let Some(w) = writer.as_mut() {
                for r in &recs {
                    w.write(r)?;
                }
            }
            if epoch_done {
                log::info!(
                    "epoch {} done: step {} loss {:.5}",
                    prep.epoch + 1,
                    learner.step,
                    learner.metrics.last().map_or(f64::NAN, |m| m.loss_total)
                );
                let every = learner.config.train.checkpoint_every;
                let last = next_epoch.is_none();
                if let Some(d) = out_dir {
                    if last || (every > 0 && (prep.epoch + 1) % every == 0) {
                        learner.checkpoint().save(d.join(CHECKPOINT_FILE))?;
                    }
                }
            }
            Ok(())
        };
        let next_epoch = |i: usize| plan.get(i + 1).map(|(e, _)| *e);
        if serial {
            for (i, (e, idx)) in plan.iter().enumerate() {
                consume(source.prepare(*e, idx)?, next_epoch(i))?;
            }
            return Ok(());
        }
        let depth = t.prefetch;
        std::thread::scope(|s| {
            let (tx, rx) = sync_channel::<Result<Prepared>>(depth);
            let plan_ref = &plan;
            s.spawn(move || {
                for (e, idx) in plan_ref {
                    if tx.send(source.prepare(*e, idx)).is_err() {
                        break;
                    }
                }
            });
            for i in 0..plan.len() {
                let prep = rx
                    .recv()
                    .map_err(|_| Error::Contract("batch preparation thread stopped early".into()))??;
                consume(prep, next_epoch(i))?;
            }
            Ok(())
        })
    }
}

/// Trains from scratch; returns the final model and its metrics.
pub fn train<T: Real>(
    config: &ExperimentConfig,
    data: &Dataset,
    teacher: Option<&TeacherSource>,
    out_dir: Option<&Path>,
) -> Result<(Model<T>, Vec<MetricRecord>)> {
    let mut trainer = Trainer::<T>::new(config, data, teacher)?;
    trainer.run(out_dir)?;
    let Learner { model, metrics, .. } = trainer.learner;
    Ok((model, metrics))
}

/// Rebuilds a model from a checkpoint written by a run.
pub fn load_model<T: Real>(ckpt: &Checkpoint) -> Result<(ExperimentConfig, Model<T>)> {
    let config = ExperimentConfig::from_toml(&ckpt.config)?;
    let c = config.data.synthetic.channels;
    let (ch, size) = match config.data.source {
        crate::config::DataSource::Synthetic => (c, config.data.image_size),
        crate::config::DataSource::Stl10 => (3, config.data.image_size),
    };
    let mut model = Model::<T>::new(&config.model, &config.projector, (ch, size, size), config.train.seed)?;
    model.load_state(ckpt)?;
    Ok((config, model))
}

pub fn run_paths(out_dir: &Path) -> (PathBuf, PathBuf) {
    (out_dir.join(METRICS_FILE), out_dir.join(CHECKPOINT_FILE))
}

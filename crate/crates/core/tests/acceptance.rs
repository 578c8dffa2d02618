//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! fails at the end if any criterion failed.
//!
//! The desk criteria (5 to 7) train real models on the synthetic task and take
//! several minutes on one core.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mvmr::config::ExperimentConfig;
use mvmr::data::stl10::{decode_stl10_images, encode_stl10_images};
use mvmr::data::{decode_matrix, encode_matrix, load_splits, Splits};
use mvmr::depmeasure::dcor_stat;
use mvmr::descriptors::scattering::{channel_count, ScatteringBank};
use mvmr::descriptors::{hog_descriptor, lsd_filter};
use mvmr::eval::report::random_encoder_probe;
use mvmr::eval::{ablation_report, linear_probe, write_report};
use mvmr::image::ImageBatch;
use mvmr::losses::{total_loss, LossWeights, Target};
use mvmr::model::{Checkpoint, Model, ProjectorConfig};
use mvmr::tensor::GradCheck;
use mvmr::train::{load_model, read_metrics, train, MetricRecord, TeacherSource, Trainer, CHECKPOINT_FILE, METRICS_FILE};
use mvmr::Real;
use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::{gaussian, gaussian_tensor, hog_reference, lsd_reference, naive_dcor, naive_dcov2, orthogonal, primitive_grad_errors};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

struct Run {
    failed: Vec<usize>,
}

impl Run {
    /// Runs one criterion; the runtime budget is part of the verdict.
    fn criterion(&mut self, id: usize, name: &str, budget_s: f64, f: impl FnOnce() -> Outcome) {
        let t = Instant::now();
        let o = f();
        let secs = t.elapsed().as_secs_f64();
        let pass = o.pass && secs <= budget_s;
        // written to the raw handle so the lines survive libtest's output capture
        let _ = writeln!(
            std::io::stderr(),
            "criterion {id} {}: {name}: {} [{secs:.1}s of {budget_s:.0}s]",
            if pass { "PASS" } else { "FAIL" },
            o.detail
        );
        if !pass {
            self.failed.push(id);
        }
    }
}

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn desk(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(config_path(name)).expect("desk config")
}

fn tiny() -> ExperimentConfig {
    ExperimentConfig::default()
        .with_overrides(&[
            "data.image_size=16",
            "data.synthetic.train_per_class=6",
            "data.synthetic.test_per_class=2",
            "model.channels=[4,8]",
            "projector.widths=[16,12]",
            "train.epochs=2",
            "train.batch_size=8",
            "train.accumulation=2",
            "train.deterministic=true",
        ])
        .unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

fn c1_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (b, d, dp) = (rng.random_range(2..=16), rng.random_range(1..=8), rng.random_range(1..=5));
        let x = gaussian(&mut rng, b, d);
        let mut y = gaussian(&mut rng, b, dp);
        for i in 0..b {
            y[[i, 0]] += x[[i, 0]] * x[[i, d - 1]];
        }
        let r = dcor_stat(x.view(), y.view()).unwrap();
        worst = worst
            .max(rel(r.dcov2, naive_dcov2(x.view(), y.view())))
            .max(rel(r.dcor, naive_dcor(x.view(), y.view())));
    }
    outcome(worst <= 1e-10, format!("200 cases, max rel err {worst:.2e} (limit 1e-10)"))
}

fn c2_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut self_err, mut inv_err): (f64, f64) = (0.0, 0.0);
    for _ in 0..20 {
        let b = rng.random_range(4..=32);
        let (d, dp) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let x = gaussian(&mut rng, b, d);
        let y = x.column(0).insert_axis(ndarray::Axis(1)).mapv(f64::sin) + gaussian(&mut rng, b, dp) * 0.3;
        let base = dcor_stat(x.view(), y.view()).unwrap().dcor;
        self_err = self_err.max((dcor_stat(x.view(), x.view()).unwrap().dcor - 1.0).abs());
        let shift = gaussian(&mut rng, 1, d);
        let q = orthogonal(&mut rng, d);
        let s = rng.random_range(0.01..100.0);
        for xv in [&x + &shift, x.dot(&q), &x * s] {
            inv_err = inv_err.max((dcor_stat(xv.view(), y.view()).unwrap().dcor - base).abs());
        }
        let qy = orthogonal(&mut rng, dp);
        for yv in [&y - 3.0, y.dot(&qy), &y * 0.2] {
            inv_err = inv_err.max((dcor_stat(x.view(), yv.view()).unwrap().dcor - base).abs());
        }
    }
    let mut indep: f64 = 0.0;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (x, y) = (gaussian(&mut rng, 512, 4), gaussian(&mut rng, 512, 7));
        indep = indep.max(dcor_stat(x.view(), y.view()).unwrap().dcor);
    }
    outcome(
        self_err <= 1e-9 && inv_err <= 1e-9 && indep <= 0.3,
        format!("|dcor(X,X)-1| {self_err:.1e}, invariance {inv_err:.1e}, independent B=512 max {indep:.3}"),
    )
}

fn c3_gradients() -> Outcome {
    let (errors, missing) = primitive_grad_errors();
    let (worst_name, worst) = errors
        .iter()
        .fold(("", 0.0f64), |acc, &(n, e)| if e > acc.1 { (n, e) } else { acc });
    let rng = &mut ChaCha8Rng::seed_from_u64(17);
    let z = gaussian_tensor(rng, &[8, 6], 0.5);
    let zt = gaussian_tensor(rng, &[8, 6], 0.5);
    let targets = [Target::new("desc", &gaussian_tensor(rng, &[8, 10], 1.0), 1.0)];
    let w = LossWeights::default();
    let total = GradCheck::new(1e-5)
        .run(|t| Ok(total_loss(&z, t, &targets, &w)?.0), &zt)
        .unwrap()
        .max_rel_err
        .max(
            GradCheck::new(1e-5)
                .run(|t| Ok(total_loss(t, &zt, &targets, &w)?.0), &z)
                .unwrap()
                .max_rel_err,
        );
    outcome(
        missing.is_empty() && worst <= 1e-6 && total <= 1e-4,
        format!(
            "total_loss {total:.1e} (limit 1e-4); {} primitive checks, worst {worst:.1e} ({worst_name}), unchecked {missing:?}",
            errors.len()
        ),
    )
}

fn c4_descriptors() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let px = Array4::from_shape_fn((20, 3, 16, 16), |_| rng.random::<f32>());
    let batch = ImageBatch::from_pixels(px.clone());
    let plane = |i: usize, c: usize| Array2::from_shape_fn((16, 16), |(y, x)| px[[i, c, y, x]] as f64);
    let luma = |i: usize| &plane(i, 0) * 0.299 + &plane(i, 1) * 0.587 + &plane(i, 2) * 0.114;
    let hog = hog_descriptor(&batch, 9, 4).unwrap();
    let lsd = lsd_filter(&batch, 3).unwrap();
    let (mut hog_err, mut lsd_err): (f64, f64) = (0.0, 0.0);
    for i in 0..20 {
        let want = hog_reference(&luma(i), 9, 4);
        for (a, b) in hog.values.row(i).iter().zip(&want) {
            hog_err = hog_err.max((*a as f64 - b).abs());
        }
        let want: Vec<f64> = (0..3).flat_map(|c| lsd_reference(&plane(i, c), 3)).collect();
        for (a, b) in lsd.values.row(i).iter().zip(&want) {
            lsd_err = lsd_err.max((*a as f64 - b).abs());
        }
    }
    let bank = ScatteringBank::new(16, 16, 2, 8).unwrap();
    let flat = bank.transform(Array2::from_elem((16, 16), 0.6).view());
    let null = flat[16..].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let p = plane(0, 0);
    let shifted = Array2::from_shape_fn((16, 16), |(y, x)| p[[(y + 12) % 16, (x + 8) % 16]]);
    let (a, b) = (bank.transform(p.view()), bank.transform(shifted.view()));
    let mut shift_err: f64 = 0.0;
    for ch in 0..81 {
        for y in 0..4 {
            for x in 0..4 {
                shift_err = shift_err.max((a[ch * 16 + y * 4 + x] - b[ch * 16 + ((y + 1) % 4) * 4 + (x + 2) % 4]).abs());
            }
        }
    }
    let channels = channel_count(2, 8);
    outcome(
        hog_err <= 1e-6 && lsd_err <= 1e-6 && null <= 1e-6 && channels == 81 && bank.channels() == 81 && shift_err <= 1e-4,
        format!(
            "HOG {hog_err:.1e}, LSD {lsd_err:.1e} on 20 images; scattering nullity {null:.1e}, {channels} channels, shift {shift_err:.1e}"
        ),
    )
}

/// Steps of one configuration until `stop` says so or `max_steps` is reached.
fn run_steps(c: &ExperimentConfig, splits: &Splits, max_steps: u64, stop: impl Fn(&MetricRecord) -> bool) -> Vec<MetricRecord> {
    let mut tr = Trainer::<f32>::new(c, &splits.pretrain, None).unwrap();
    let mut out = Vec::new();
    for e in 0..c.train.epochs {
        for idx in tr.source.epoch_batches(e) {
            let p = tr.source.prepare(e, &idx).unwrap();
            if let (_, Some(r)) = tr.learner.micro_step(&p).unwrap() {
                let done = stop(&r) || r.step + 1 >= max_steps;
                out.push(r);
                if done {
                    return out;
                }
            }
        }
    }
    out
}

fn c5_collapse(splits: &Splits, desk_metrics: &[MetricRecord]) -> Outcome {
    let base = desk("desk.toml");
    let steps_per_epoch = (splits.pretrain.len() / base.train.batch_size) as u64;

    let mut mse_only = base.clone();
    mse_only.loss.lambda = 1.0;
    mse_only.loss.mu = 0.0;
    mse_only.loss.alpha = 0.0;
    mse_only.descriptors.clear();
    mse_only.train.lr = 5e-2;
    mse_only.train.deterministic = true;
    let collapse = run_steps(&mse_only, splits, 200, |r| r.emb_std_min < 1e-3);
    let last = collapse.last().unwrap();
    let collapsed = last.emb_std_min < 1e-3;

    let mut full = base.clone();
    full.train.lr = 5e-2;
    full.train.deterministic = true;
    let kept = run_steps(&full, splits, 200, |_| false);
    let tail = &kept[kept.len().saturating_sub(steps_per_epoch as usize)..];
    let full_std = tail.iter().map(|r| r.emb_std_mean).sum::<f64>() / tail.len() as f64;

    let final_epoch = desk_metrics.last().unwrap().epoch;
    let desk_tail: Vec<_> = desk_metrics.iter().filter(|r| r.epoch == final_epoch).collect();
    let desk_std = desk_tail.iter().map(|r| r.emb_std_mean).sum::<f64>() / desk_tail.len() as f64;
    outcome(
        collapsed && full_std >= 0.5 && desk_std >= 0.5,
        format!(
            "MSE-only min std {:.1e} at step {} (lr 5e-2); full loss at the same lr, mean std {full_std:.3} over its last epoch; desk run mean std {desk_std:.3} over final epoch",
            last.emb_std_min, last.step
        ),
    )
}

fn c6_efficacy(splits: &Splits, model: &Model<f32>, c: &ExperimentConfig, train_secs: f64) -> Outcome {
    let ssl = linear_probe(model, &splits.train, &splits.test, &c.eval, c.train.seed).unwrap();
    let random = random_encoder_probe(c, splits).unwrap();
    let gain = 100.0 * (ssl.top1 - random.top1);
    outcome(
        ssl.top1 >= 0.9 && gain >= 15.0,
        format!(
            "{}/{} images, {} epochs ({train_secs:.0}s): top-1 {:.1}% (top-5 {:.1}%), random encoder {:.1}%, gain {gain:.1} points",
            splits.pretrain.len(),
            splits.test.len(),
            c.train.epochs,
            100.0 * ssl.top1,
            100.0 * ssl.top5,
            100.0 * random.top1
        ),
    )
}

fn c7_distill(splits: &Splits) -> Outcome {
    let c = desk("desk-distill.toml");
    let dims = splits.pretrain.image_dims();
    let mut tenc = c.model.clone();
    tenc.channels = vec![16, 32, 32];
    let teacher = Model::<f32>::new(&tenc, &ProjectorConfig { widths: vec![] }, dims, 1234).unwrap();
    let rows = teacher.embed(&splits.pretrain.images, false).unwrap();
    let held_out = teacher.embed(&splits.test.images, false).unwrap();
    let source = TeacherSource::new(rows).unwrap();
    let (student, _) = train::<f32>(&c, &splits.pretrain, Some(&source), None).unwrap();

    let z = student.embed(&splits.test.images, true).unwrap();
    let d = dcor_stat(z.mapv(f64::from).view(), held_out.mapv(f64::from).view()).unwrap().dcor;
    let fresh = Model::<f32>::new(&c.model, &c.projector, dims, c.train.seed).unwrap();
    let distilled = linear_probe(&student, &splits.train, &splits.test, &c.eval, c.train.seed).unwrap();
    let random = linear_probe(&fresh, &splits.train, &splits.test, &c.eval, c.train.seed).unwrap();
    let gain = 100.0 * (distilled.top1 - random.top1);
    outcome(
        d >= 0.8 && gain >= 10.0 && z.ncols() == 16 && held_out.ncols() == 32,
        format!(
            "D={} vs D_t={}: held-out dcor {d:.3}; probe {:.1}% vs random student {:.1}% (gain {gain:.1})",
            z.ncols(),
            held_out.ncols(),
            100.0 * distilled.top1,
            100.0 * random.top1
        ),
    )
}

/// Two same-seed runs into separate directories; returns (identical logs,
/// identical checkpoints, bitwise reload forward).
fn twin_runs<T: Real>(dtype: &str, dir: &Path) -> (bool, bool, bool) {
    let c = tiny().with_overrides(&[format!("train.dtype=\"{dtype}\"")]).unwrap();
    let splits = load_splits(&c.data, c.train.seed).unwrap();
    let runs: Vec<PathBuf> = (0..2)
        .map(|k| {
            let p = dir.join(format!("{dtype}-{k}"));
            std::fs::create_dir_all(&p).unwrap();
            p
        })
        .collect();
    let (model, _) = train::<T>(&c, &splits.pretrain, None, Some(&runs[0])).unwrap();
    train::<T>(&c, &splits.pretrain, None, Some(&runs[1])).unwrap();
    let read = |p: &Path, f: &str| std::fs::read(p.join(f)).unwrap();
    let logs = read(&runs[0], METRICS_FILE) == read(&runs[1], METRICS_FILE);
    let ckpt = read(&runs[0], CHECKPOINT_FILE) == read(&runs[1], CHECKPOINT_FILE);
    let (_, restored) = load_model::<T>(&Checkpoint::load(runs[0].join(CHECKPOINT_FILE)).unwrap()).unwrap();
    let forward = [false, true].iter().all(|&projected| {
        let a = model.embed(&splits.test.images, projected).unwrap();
        let b = restored.embed(&splits.test.images, projected).unwrap();
        a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits())
    });
    (logs, ckpt, forward)
}

fn c8_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let a = twin_runs::<f32>("f32", dir.path());
    let b = twin_runs::<f64>("f64", dir.path());
    let (same_logs, same_ckpt, bitwise_forward) = (a.0 && b.0, a.1 && b.1, a.2 && b.2);
    let c = tiny();
    let mut formats = ExperimentConfig::from_toml(&c.to_toml()).unwrap() == c;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = Array2::from_shape_fn((9, 5), |_| rng.random::<f32>() - 0.5);
    formats &= decode_matrix(&encode_matrix(&m)).unwrap() == m;
    let bytes: Vec<u8> = (0..2 * 3 * 96 * 96).map(|_| rng.random()).collect();
    formats &= encode_stl10_images(&decode_stl10_images(&bytes, None).unwrap()).unwrap() == bytes;
    let ck = Checkpoint::load(dir.path().join("f64-0").join(CHECKPOINT_FILE)).unwrap();
    formats &= Checkpoint::decode(&ck.encode()).unwrap() == ck;
    let logged = read_metrics(dir.path().join("f64-0").join(METRICS_FILE)).unwrap();
    let lines: String = logged.iter().map(|r| r.to_line() + "\n").collect();
    formats &= lines.as_bytes() == std::fs::read(dir.path().join("f64-0").join(METRICS_FILE)).unwrap();
    outcome(
        same_logs && same_ckpt && bitwise_forward && formats,
        format!(
            "identical logs {same_logs}, identical checkpoints {same_ckpt}, bitwise reload forward {bitwise_forward}, format round trips {formats}"
        ),
    )
}

fn c9_report() -> Outcome {
    let c = desk("desk.toml")
        .with_overrides(&[
            "data.image_size=16",
            "data.synthetic.train_per_class=24",
            "data.synthetic.test_per_class=8",
            "train.batch_size=32",
            "eval.ablation_epochs=1",
            "eval.epochs=2",
        ])
        .unwrap();
    let splits = load_splits(&c.data, c.train.seed).unwrap();
    let report = ablation_report(&c, &splits).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_report(dir.path(), &report).unwrap();
    let rows: Vec<(String, usize)> = report.grids.iter().map(|g| (g.name.clone(), g.rows.len())).collect();
    let want = [("loss", 7), ("descriptors", 31), ("projector", 13), ("augment", 5)];
    let shapes = rows.len() == 4 && rows.iter().zip(want).all(|((n, r), (wn, wr))| n == wn && *r == wr);
    let md = std::fs::read_to_string(dir.path().join("report.md")).unwrap_or_default();
    let files = dir.path().join("report.json").exists() && md.matches("\n## ").count() == 4;
    let finite = report.grids.iter().flat_map(|g| &g.rows).all(|r| r.top1.is_finite() && r.top5 >= r.top1);
    outcome(
        shapes && files && finite,
        format!("grids {rows:?}; report.json and report.md written {files}"),
    )
}

#[test]
fn acceptance_criteria() {
    let mut run = Run { failed: Vec::new() };
    run.criterion(1, "dCor oracle equivalence", 10.0, c1_oracle);
    run.criterion(2, "dCor properties", 30.0, c2_properties);
    run.criterion(3, "gradient integrity", 60.0, c3_gradients);
    run.criterion(4, "descriptor oracles", 60.0, c4_descriptors);

    let c = desk("desk.toml");
    let splits = load_splits(&c.data, c.train.seed).unwrap();
    let t = Instant::now();
    let (model, metrics) = train::<f32>(&c, &splits.pretrain, None, None).unwrap();
    let train_secs = t.elapsed().as_secs_f64();

    run.criterion(5, "collapse demonstration", 300.0, || c5_collapse(&splits, &metrics));
    run.criterion(6, "toy SSL efficacy", 900.0 - train_secs, || c6_efficacy(&splits, &model, &c, train_secs));
    run.criterion(7, "cross-shape distillation", 600.0, || c7_distill(&splits));
    run.criterion(8, "determinism and persistence", 120.0, c8_determinism);
    run.criterion(9, "ablation report", 600.0, c9_report);
    assert!(run.failed.is_empty(), "failed criteria: {:?}", run.failed);
}

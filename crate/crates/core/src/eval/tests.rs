use super::report::*;
use super::*;
use crate::config::ExperimentConfig;
use crate::data::load_splits;
use ndarray::array;

#[test]
fn topk_perfect_and_ties() {
    let l = array![[3.0, 1.0, 0.0], [0.0, 2.0, 1.0]];
    assert_eq!(topk_accuracy(l.view(), &[0, 1], 1).unwrap(), 1.0);
    let flat = Array2::<f64>::zeros((3, 4));
    assert_eq!(topk_accuracy(flat.view(), &[0, 1, 2], 1).unwrap(), 1.0 / 3.0);
    assert_eq!(topk_accuracy(flat.view(), &[0, 1, 3], 2).unwrap(), 2.0 / 3.0);
}

#[test]
fn topk_hand_case_matches_enumeration() {
    let l = array![[0.1, 0.5, 0.4], [0.7, 0.2, 0.1], [0.3, 0.3, 0.4]];
    let y = [2, 1, 1];
    // row 0: label 2 ranks second; row 1: label 1 ranks second; row 2: 0.4 first, then 0 ties 1 and wins
    assert_eq!(topk_accuracy(l.view(), &y, 1).unwrap(), 0.0);
    assert_eq!(topk_accuracy(l.view(), &y, 2).unwrap(), 2.0 / 3.0);
    assert_eq!(topk_accuracy(l.view(), &y, 3).unwrap(), 1.0);
    let mono = l.mapv(|v: f64| (3.0 * v).exp() - 7.0);
    for k in 1..=3 {
        assert_eq!(topk_accuracy(mono.view(), &y, k).unwrap(), topk_accuracy(l.view(), &y, k).unwrap());
    }
}

#[test]
fn top5_with_four_classes_is_perfect() {
    let l = array![[9.0, 1.0, 0.0, -3.0], [0.0, 0.0, 5.0, 1.0]];
    assert_eq!(topk_accuracy(l.view(), &[3, 0], 5).unwrap(), 1.0);
    assert!(topk_accuracy(l.view(), &[4, 0], 1).is_err());
}

fn probe_cfg() -> ProbeConfig {
    ProbeConfig {
        epochs: 20,
        lr: 1e-2,
        batch_size: 16,
        standardize: true,
        seed: 1,
    }
}

#[test]
fn one_hot_features_are_perfectly_probed() {
    let y: Vec<usize> = (0..80).map(|i| i % 4).collect();
    let x = Array2::from_shape_fn((80, 4), |(i, j)| if y[i] == j { 1.0 } else { 0.0 });
    let r = probe_features(&x, &y, &x, &y, 4, &probe_cfg()).unwrap();
    assert_eq!(r.top1, 1.0);
    assert_eq!(r.top5, 1.0);
}

#[test]
fn probe_is_deterministic_per_seed() {
    let y: Vec<usize> = (0..60).map(|i| i % 3).collect();
    let x = Array2::from_shape_fn((60, 5), |(i, j)| ((i * 13 + j * 7) % 11) as f32 + y[i] as f32);
    let a = fit_probe(&x, &y, 3, &probe_cfg()).unwrap();
    let b = fit_probe(&x, &y, 3, &probe_cfg()).unwrap();
    assert_eq!(a.w, b.w);
    assert!(fit_probe(&x, &y[..10], 3, &probe_cfg()).is_err());
}

fn tiny() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.data.image_size = 16;
    c.data.synthetic.size = 16;
    c.data.synthetic.train_per_class = 4;
    c.data.synthetic.test_per_class = 2;
    c.model.channels = vec![4, 8];
    c.projector.widths = vec![16, 8];
    c.train.batch_size = 8;
    c.train.accumulation = 1;
    c.train.lr = 1e-3;
    c.eval.epochs = 2;
    c.eval.ablation_epochs = 1;
    c
}

#[test]
fn probe_leaves_encoder_untouched() {
    let c = tiny();
    let s = load_splits(&c.data, 0).unwrap();
    let m = Model::<f32>::new(&c.model, &c.projector, s.train.image_dims(), 0).unwrap();
    let before = (m.checksum(), m.buffers().to_vec());
    let r = linear_probe(&m, &s.train, &s.test, &c.eval, 0).unwrap();
    assert_eq!((m.checksum(), m.buffers().to_vec()), before);
    assert!((0.0..=1.0).contains(&r.top1));
    let mut other = s.test.clone();
    other.classes = 5;
    assert!(matches!(linear_probe(&m, &s.train, &other, &c.eval, 0), Err(Error::Data(_))));
    let mut unlabeled = s.test.clone();
    unlabeled.labels = None;
    assert!(matches!(linear_probe(&m, &s.train, &unlabeled, &c.eval, 0), Err(Error::Data(_))));
}

#[test]
fn stats_detect_collapse_and_copies() {
    let collapsed = Array2::from_elem((10, 3), 0.25f32);
    let s = embedding_stats(&collapsed, &[]).unwrap();
    assert_eq!(s.std_min, 0.0);
    let d = Array2::from_shape_fn((12, 4), |(i, j)| ((i * 5 + j * 3) % 7) as f32);
    let s = embedding_stats(&d, &[("copy".into(), d.clone())]).unwrap();
    assert!((s.dcor[0].1 - 1.0).abs() < 1e-12);
    assert!(s.std.iter().all(|&v| v >= 0.0));
}

#[test]
fn grid_shapes() {
    let c = ExperimentConfig::default();
    let loss = loss_grid(&c);
    assert_eq!(loss.len(), 7);
    assert_eq!(loss[6].0, "L1+L2+L3");
    assert!(loss[0].1.descriptors.is_empty() && loss[0].1.loss.alpha == 0.0);
    assert_eq!(loss[2].1.loss.lambda, 0.0);
    let desc = descriptor_grid(&c);
    assert_eq!(desc.len(), 31);
    let mut labels: Vec<_> = desc.iter().map(|d| d.0.clone()).collect();
    assert_eq!(labels[0], "original");
    assert_eq!(labels[30], "original+scatnet+augmented+hog+lsd");
    labels.sort();
    labels.dedup();
    assert_eq!(labels.len(), 31);
    let proj = projector_grid(&c);
    assert_eq!(proj.len(), 13);
    assert_eq!(proj[0].0, "256-256-256");
    assert!(proj[12].1.projector.widths.is_empty());
    let aug = augment_grid(&c);
    assert_eq!(aug.len(), 5);
    assert_eq!(aug[3].1.augment.blur_p, 0.0);
    assert_eq!(aug[4].1.augment.blur_p, c.augment.blur_p);
    assert!(grid_cells("colour", &c).is_err());
}

#[test]
fn report_is_reproducible_and_written() {
    let mut c = tiny();
    c.eval.grids = vec!["loss".into(), "augment".into()];
    let s = load_splits(&c.data, 0).unwrap();
    let a = ablation_report(&c, &s).unwrap();
    let b = ablation_report(&c, &s).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.grids[0].rows.len(), 7);
    let dir = tempfile::tempdir().unwrap();
    write_report(dir.path(), &a).unwrap();
    let back: AblationReport =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(back.grids.len(), a.grids.len());
    for (x, y) in back.grids.iter().zip(&a.grids) {
        for (r, q) in x.rows.iter().zip(&y.rows) {
            assert_eq!(r.label, q.label);
            assert!((r.top1 - q.top1).abs() < 1e-12);
        }
    }
    let md = std::fs::read_to_string(dir.path().join("report.md")).unwrap();
    assert!(md.contains("| L1+L2+L3 |"));
}

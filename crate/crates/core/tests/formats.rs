use mvmr::config::ExperimentConfig;
use mvmr::data::stl10::{decode_stl10_images, decode_stl10_labels, encode_stl10_images};
use mvmr::data::{decode_matrix, encode_matrix, load_splits, read_matrix, write_matrix};
use mvmr::model::Checkpoint;
use mvmr::train::{load_model, read_metrics, train, MetricsWriter, CHECKPOINT_FILE, METRICS_FILE};
use mvmr::{DType, Error, Real};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(dtype: &str) -> ExperimentConfig {
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
            "train.checkpoint_every=1",
            &format!("train.dtype=\"{dtype}\""),
        ])
        .unwrap()
}

#[test]
fn matrix_round_trip_is_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let m = Array2::from_shape_fn((13, 7), |_| rng.random::<f32>() * 2e3 - 1e3);
    let back = decode_matrix(&encode_matrix(&m)).unwrap();
    assert_eq!(back.dim(), m.dim());
    assert!(back.iter().zip(&m).all(|(a, b)| a.to_bits() == b.to_bits()));

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.mvte");
    write_matrix(&p, &m).unwrap();
    assert_eq!(read_matrix(&p).unwrap(), m);

    let bytes = encode_matrix(&m);
    let err = decode_matrix(&bytes[..bytes.len() - 3]).unwrap_err();
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn stl10_bytes_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 3;
    let bytes: Vec<u8> = (0..n * 3 * 96 * 96).map(|_| rng.random()).collect();
    let px = decode_stl10_images(&bytes, None).unwrap();
    assert_eq!(px.dim(), (n, 3, 96, 96));
    assert!(px.iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert_eq!(encode_stl10_images(&px).unwrap(), bytes);
    assert_eq!(decode_stl10_images(&bytes, Some(2)).unwrap().dim().0, 2);
    assert!(decode_stl10_images(&bytes[1..], None).is_err());

    assert_eq!(decode_stl10_labels(&[1, 10, 5], None).unwrap(), vec![0, 9, 4]);
    assert_eq!(decode_stl10_labels(&[1, 11], None).unwrap_err().exit_code(), 3);
}

#[test]
fn config_toml_round_trip_keeps_digest() {
    let c = tiny("f64");
    let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.digest(), c.digest());
    assert_ne!(tiny("f32").digest(), c.digest());
}

#[test]
fn metrics_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (_, records) = train::<f64>(&tiny("f64"), &load_splits(&tiny("f64").data, 0).unwrap().pretrain, None, None).unwrap();
    let p = dir.path().join(METRICS_FILE);
    let mut w = MetricsWriter::create(&p).unwrap();
    for r in &records {
        w.write(r).unwrap();
    }
    drop(w);
    assert_eq!(read_metrics(&p).unwrap(), records);
}

fn checkpoint_round_trip<T: Real>(dtype: &str) {
    let c = tiny(dtype);
    let splits = load_splits(&c.data, c.train.seed).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (model, _) = train::<T>(&c, &splits.pretrain, None, Some(dir.path())).unwrap();

    let ckpt = Checkpoint::load(dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ckpt.digest, c.digest());
    assert!(ckpt.optimizer.is_some());
    assert_eq!(Checkpoint::decode(&ckpt.encode()).unwrap(), ckpt);

    let (cfg, restored) = load_model::<T>(&ckpt).unwrap();
    assert_eq!(cfg, c);
    for projected in [false, true] {
        let a = model.embed(&splits.test.images, projected).unwrap();
        let b = restored.embed(&splits.test.images, projected).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_eq!(model.checksum(), restored.checksum());

    let bytes = ckpt.encode();
    for cut in [10, bytes.len() / 2, bytes.len() - 1] {
        let err = Checkpoint::decode(&bytes[..cut]).unwrap_err();
        assert!(matches!(err, Error::Integrity(_)), "{err}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::decode(&bad).unwrap_err(), Error::Format(_)));
}

#[test]
fn checkpoint_round_trip_f64() {
    checkpoint_round_trip::<f64>("f64");
}

#[test]
fn checkpoint_round_trip_f32() {
    checkpoint_round_trip::<f32>("f32");
    assert_eq!(tiny("f32").train.dtype, DType::F32);
}

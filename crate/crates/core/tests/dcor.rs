use mvmr::depmeasure::{dcor_loss, dcor_stat, dcov2_stat};
use mvmr::Tensor;
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::{gaussian, naive_dcor, naive_dcov2, orthogonal};

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

#[test]
fn oracle_equivalence_200_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let b = rng.random_range(2..=16);
        let d = rng.random_range(1..=8);
        let dp = rng.random_range(1..=5);
        let x = gaussian(&mut rng, b, d);
        // mix in some dependence so dcov2 is not always near zero
        let mut y = gaussian(&mut rng, b, dp);
        for i in 0..b {
            y[[i, 0]] += x[[i, 0]] * x[[i, d - 1]];
        }
        let r = dcor_stat(x.view(), y.view()).unwrap();
        worst = worst
            .max(rel(r.dcov2, naive_dcov2(x.view(), y.view())))
            .max(rel(r.dvar_x, naive_dcov2(x.view(), x.view())))
            .max(rel(r.dvar_y, naive_dcov2(y.view(), y.view())))
            .max(rel(r.dcor, naive_dcor(x.view(), y.view())))
            .max(rel(dcov2_stat(x.view(), y.view()).unwrap(), r.dcov2));
    }
    assert!(worst <= 1e-10, "worst relative error {worst:e}");
}

#[test]
fn hand_case_b2() {
    // two points: a = [[0,2],[2,0]] centres to [[-1,1],[1,-1]]
    let x = ndarray::array![[0.0], [2.0]];
    let y = ndarray::array![[1.0, 1.0], [1.0, 4.0]];
    let r = dcor_stat(x.view(), y.view()).unwrap();
    // A·C = 4 · (1)(1.5) / 4
    assert!((r.dcov2 - 1.5).abs() < 1e-12);
    assert!((r.dvar_x - 1.0).abs() < 1e-12);
    assert!((r.dvar_y - 2.25).abs() < 1e-12);
    assert!((r.dcor - 1.0).abs() < 1e-12);
}

#[test]
fn self_dependence_and_invariances() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let b = rng.random_range(4..=32);
        let (d, dp) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let x = gaussian(&mut rng, b, d);
        let y = x.column(0).insert_axis(ndarray::Axis(1)).mapv(f64::sin) + gaussian(&mut rng, b, dp) * 0.3;
        let base = dcor_stat(x.view(), y.view()).unwrap().dcor;
        assert!((dcor_stat(x.view(), x.view()).unwrap().dcor - 1.0).abs() <= 1e-9);

        let shift = gaussian(&mut rng, 1, d);
        let q = orthogonal(&mut rng, d);
        let s = rng.random_range(0.01..100.0);
        let variants = [&x + &shift, x.dot(&q), &x * s, (x.dot(&q) + &shift) * 2.5];
        for xv in &variants {
            let v = dcor_stat(xv.view(), y.view()).unwrap().dcor;
            assert!((v - base).abs() <= 1e-9, "{v} vs {base}");
        }
        let qy = orthogonal(&mut rng, dp);
        let yv = (y.dot(&qy) - 3.0) * 0.2;
        assert!((dcor_stat(x.view(), yv.view()).unwrap().dcor - base).abs() <= 1e-9);
        // symmetry is exact
        assert_eq!(dcor_stat(y.view(), x.view()).unwrap().dcor, base);
        let rot = (x.dot(&q) + &shift) * 2.5;
        assert!((dcor_stat(x.view(), rot.view()).unwrap().dcor - 1.0).abs() <= 1e-9);
    }
}

#[test]
fn independent_gaussians_score_low() {
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let x = gaussian(&mut rng, 512, 4);
        let y = gaussian(&mut rng, 512, 7);
        worst = worst.max(dcor_stat(x.view(), y.view()).unwrap().dcor);
    }
    assert!(worst <= 0.3, "max dcor over seeds {worst}");
}

#[test]
fn identical_rows_are_degenerate() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = gaussian(&mut rng, 8, 3);
    let y = Array2::from_elem((8, 2), 0.7);
    let r = dcor_stat(x.view(), y.view()).unwrap();
    assert!(r.degenerate);
    assert_eq!(r.dcor, 0.0);
    assert!(r.dcov2.abs() <= 1e-12);
}

#[test]
fn differentiable_route_matches_statistic() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = gaussian(&mut rng, 16, 5);
    let y = gaussian(&mut rng, 16, 3) + &x.slice(ndarray::s![.., 0..3]);
    let t = |m: &Array2<f64>| Tensor::new(m.iter().copied().collect(), &[m.nrows(), m.ncols()]).unwrap();
    let smooth = dcor_loss(&t(&x), &t(&y)).unwrap().item();
    let stat = dcor_stat(x.view(), y.view()).unwrap().dcor;
    assert!((smooth - stat).abs() <= 1e-6, "{smooth} vs {stat}");
}

fn matrix(b: usize, d: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-10.0f64..10.0, b * d).prop_map(move |v| Array2::from_shape_vec((b, d), v).unwrap())
}

fn pair() -> impl Strategy<Value = (Array2<f64>, Array2<f64>)> {
    (2usize..12, 1usize..6, 1usize..6).prop_flat_map(|(b, d, dp)| (matrix(b, d), matrix(b, dp)))
}

proptest! {
    #[test]
    fn dcor_is_bounded_and_symmetric((x, y) in pair()) {
        let r = dcor_stat(x.view(), y.view()).unwrap();
        prop_assert!(r.dcor >= 0.0 && r.dcor <= 1.0 + 1e-9);
        prop_assert!(r.dcov2 >= -1e-9);
        prop_assert_eq!(r.dcor, dcor_stat(y.view(), x.view()).unwrap().dcor);
    }
}

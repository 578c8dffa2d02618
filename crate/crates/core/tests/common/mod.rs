//! Brute-force references shared by the integration tests.
#![allow(dead_code)]

use std::collections::HashSet;
use std::f64::consts::PI;

use mvmr::tensor::{BatchNormMode, GradCheck, Primitive};
use mvmr::{Result, Tensor};
use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn gaussian(rng: &mut ChaCha8Rng, b: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((b, d), |_| rng.sample(StandardNormal))
}

/// Literal four-term evaluation of the V-statistic:
/// A_ij = a_ij − ā_i· − ā_·j + ā_··, dcov² = (1/B²) Σ A_ij C_ij.
pub fn naive_centered(x: ArrayView2<f64>) -> Vec<Vec<f64>> {
    let n = x.nrows();
    let mut a = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..x.ncols() {
                let d = x[[i, k]] - x[[j, k]];
                s += d * d;
            }
            a[i][j] = s.sqrt();
        }
    }
    let row: Vec<f64> = (0..n).map(|i| (0..n).map(|j| a[i][j]).sum::<f64>() / n as f64).collect();
    let col: Vec<f64> = (0..n).map(|j| (0..n).map(|i| a[i][j]).sum::<f64>() / n as f64).collect();
    let all = row.iter().sum::<f64>() / n as f64;
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            out[i][j] = a[i][j] - row[i] - col[j] + all;
        }
    }
    out
}

pub fn naive_dcov2(x: ArrayView2<f64>, y: ArrayView2<f64>) -> f64 {
    let (a, c) = (naive_centered(x), naive_centered(y));
    let n = x.nrows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            s += a[i][j] * c[i][j];
        }
    }
    s / (n * n) as f64
}

pub fn naive_dcor(x: ArrayView2<f64>, y: ArrayView2<f64>) -> f64 {
    naive_dcov2(x, y) / (naive_dcov2(x, x) * naive_dcov2(y, y)).sqrt()
}

pub fn orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Array2<f64> {
    // Gram-Schmidt on a Gaussian matrix
    let m = gaussian(rng, d, d);
    let mut q = Array2::<f64>::zeros((d, d));
    for j in 0..d {
        let mut v = m.column(j).to_owned();
        for k in 0..j {
            let qk = q.column(k).to_owned();
            let p = v.dot(&qk);
            v = v - &(qk * p);
        }
        let n = v.dot(&v).sqrt();
        q.column_mut(j).assign(&(v / n));
    }
    q
}

/// Per-pixel reference: central differences inside the border, unsigned
/// orientation, triangular vote onto every bin centre, L2 norm per cell.
pub fn hog_reference(p: &Array2<f64>, bins: usize, pool: usize) -> Vec<f64> {
    let (h, w) = p.dim();
    let width = PI / bins as f64;
    let mut out = Vec::new();
    for cy in 0..h / pool {
        for cx in 0..w / pool {
            let mut hist = vec![0.0; bins];
            for y in cy * pool..(cy + 1) * pool {
                for x in cx * pool..(cx + 1) * pool {
                    let inside_x = x > 0 && x + 1 < w;
                    let inside_y = y > 0 && y + 1 < h;
                    let gx = if inside_x { p[[y, x + 1]] - p[[y, x - 1]] } else { 0.0 };
                    let gy = if inside_y { p[[y + 1, x]] - p[[y - 1, x]] } else { 0.0 };
                    let mag = gx.hypot(gy);
                    if mag == 0.0 {
                        continue;
                    }
                    let theta = gy.atan2(gx).rem_euclid(PI);
                    for (b, v) in hist.iter_mut().enumerate() {
                        let centre = b as f64 * width;
                        let mut dist = (theta - centre).abs();
                        dist = dist.min(PI - dist);
                        *v += mag * (1.0 - dist / width).max(0.0);
                    }
                }
            }
            let norm = hist.iter().map(|v| v * v).sum::<f64>().sqrt();
            out.extend(hist.iter().map(|v| v / (norm + 1e-6)));
        }
    }
    out
}

/// Two-pass population std over the clamped `k×k` window.
pub fn lsd_reference(p: &Array2<f64>, k: usize) -> Vec<f64> {
    let (h, w) = p.dim();
    let r = (k / 2) as isize;
    let at = |y: isize, x: isize| p[[y.clamp(0, h as isize - 1) as usize, x.clamp(0, w as isize - 1) as usize]];
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut vals = Vec::new();
            for dy in -r..=r {
                for dx in -r..=r {
                    vals.push(at(y + dy, x + dx));
                }
            }
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            out.push(var.sqrt());
        }
    }
    out
}

pub const H: f64 = 1e-5;
pub const PRIMITIVE_TOL: f64 = 1e-6;

/// Values bounded away from zero so relu and max kinks are never straddled.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(0.2..1.5);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(v, shape).unwrap()
}

pub fn gaussian_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let v = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(v, shape).unwrap()
}

fn walk(t: &Tensor<f64>, seen: &mut HashSet<Primitive>) {
    if let Some(op) = t.op() {
        seen.insert(op);
    }
    for p in t.parents() {
        walk(p, seen);
    }
}

struct Checker {
    rng: ChaCha8Rng,
    covered: HashSet<Primitive>,
    worst: Vec<(&'static str, f64)>,
}

impl Checker {
    /// Checks `x ↦ Σ f(x) ⊙ R` for a fixed random `R`, so every output
    /// coordinate contributes with a distinct weight.
    fn check<F>(&mut self, name: &'static str, x: &Tensor<f64>, f: F)
    where
        F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
    {
        let probe = f(&Tensor::leaf(x.to_vec(), x.shape(), true).unwrap()).unwrap();
        walk(&probe, &mut self.covered);
        let r = gaussian_tensor(&mut self.rng, probe.shape(), 1.0);
        let rep = GradCheck::new(H)
            .run(|t| Ok(f(t)?.mul(&r)?.sum_all()), x)
            .unwrap();
        self.worst.push((name, rep.max_rel_err));
    }
}

/// Max relative gradient error per checked primitive use, and the primitives
/// the checks never reached.
pub fn primitive_grad_errors() -> (Vec<(&'static str, f64)>, Vec<Primitive>) {
    let mut c = Checker {
        rng: ChaCha8Rng::seed_from_u64(99),
        covered: HashSet::new(),
        worst: Vec::new(),
    };
    let rng = &mut ChaCha8Rng::seed_from_u64(5);
    let a = away_from_zero(rng, &[3, 4]);
    let b = away_from_zero(rng, &[3, 4]);
    let row = away_from_zero(rng, &[1, 4]);

    c.check("add", &a, |t| t.add(&b));
    c.check("add broadcast", &row, |t| a.add(t));
    c.check("sub lhs", &a, |t| t.sub(&b));
    c.check("sub rhs", &b, |t| a.sub(t));
    c.check("mul", &a, |t| t.mul(&b));
    c.check("mul broadcast", &row, |t| a.mul(t));
    c.check("div numerator", &a, |t| t.div(&b));
    c.check("div denominator", &b, |t| a.div(t));
    c.check("scale", &a, |t| Ok(t.scale(-2.5)));
    c.check("add_scalar", &a, |t| Ok(t.add_scalar(0.75)));
    c.check("relu", &a, |t| Ok(t.relu()));
    c.check("max_scalar", &a, |t| Ok(t.max_scalar(0.1)));
    c.check("square", &a, |t| Ok(t.square()));
    c.check("sqrt_stable", &a, |t| Ok(t.square().sqrt_stable(1e-4)));
    c.check("sum_axes", &a, |t| t.sum_axes(&[0], true));
    c.check("mean_axes", &a, |t| t.mean_axes(&[1], false));
    c.check("mean_all", &a, |t| Ok(t.mean_all()));
    c.check("reshape", &a, |t| t.reshape(&[2, 6]));

    let m = away_from_zero(rng, &[4, 5]);
    c.check("matmul lhs", &a, |t| t.matmul(&m));
    c.check("matmul rhs", &m, |t| a.matmul(t));

    let img = gaussian_tensor(rng, &[2, 3, 6, 6], 1.0);
    let w = gaussian_tensor(rng, &[4, 3, 3, 3], 0.5);
    c.check("conv2d input", &img, |t| t.conv2d(&w, 1, 1));
    c.check("conv2d weight", &w, |t| img.conv2d(t, 2, 1));

    let x = gaussian_tensor(rng, &[6, 3], 1.0);
    let g = away_from_zero(rng, &[3]);
    let be = away_from_zero(rng, &[3]);
    let bn = |x: &Tensor<f64>, g: &Tensor<f64>, b: &Tensor<f64>| {
        Ok(x.batch_norm(Some(g), Some(b), BatchNormMode::Train, 1e-5)?.output)
    };
    c.check("batch_norm input", &x, |t| bn(t, &g, &be));
    c.check("batch_norm gamma", &g, |t| bn(&x, t, &be));
    c.check("batch_norm beta", &be, |t| bn(&x, &g, t));
    let fmap = gaussian_tensor(rng, &[3, 2, 2, 2], 1.0);
    c.check("batch_norm spatial", &fmap, |t| {
        Ok(t.batch_norm(None, None, BatchNormMode::Train, 1e-5)?.output)
    });
    let (mean, var) = ([0.1, -0.2, 0.3], [0.5, 1.5, 2.0]);
    c.check("batch_norm eval", &x, |t| {
        Ok(t.batch_norm(Some(&g), Some(&be), BatchNormMode::Eval { mean: &mean, var: &var }, 1e-5)?.output)
    });

    let pts = gaussian_tensor(rng, &[5, 3], 1.0);
    c.check("pairwise_sq_dist", &pts, |t| t.pairwise_sq_dist());
    let logits = gaussian_tensor(rng, &[4, 5], 1.0);
    c.check("cross_entropy", &logits, |t| t.cross_entropy(&[0, 3, 4, 1]));

    let missing = Primitive::ALL.iter().copied().filter(|p| !c.covered.contains(p)).collect();
    (c.worst, missing)
}

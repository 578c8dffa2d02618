//! Local standard deviation filter.

use ndarray::{Array2, ArrayView2};

/// Population standard deviation of the `kernel×kernel` window around every
/// pixel, with replicate padding. Uses integral images of the mean-shifted
/// plane, so a constant plane yields exact zeros.
pub fn local_std(plane: ArrayView2<'_, f64>, kernel: usize) -> Array2<f64> {
    let (h, w) = plane.dim();
    let r = kernel / 2;
    let shift = plane.mean().unwrap_or(0.0);
    let (ph, pw) = (h + 2 * r, w + 2 * r);
    // Integral images carry an extra leading row and column of zeros.
    let mut s1 = vec![0.0f64; (ph + 1) * (pw + 1)];
    let mut s2 = vec![0.0f64; (ph + 1) * (pw + 1)];
    let at = |y: usize, x: usize| y * (pw + 1) + x;
    for y in 0..ph {
        let sy = y.saturating_sub(r).min(h - 1);
        let mut row1 = 0.0;
        let mut row2 = 0.0;
        for x in 0..pw {
            let sx = x.saturating_sub(r).min(w - 1);
            let v = plane[[sy, sx]] - shift;
            row1 += v;
            row2 += v * v;
            s1[at(y + 1, x + 1)] = s1[at(y, x + 1)] + row1;
            s2[at(y + 1, x + 1)] = s2[at(y, x + 1)] + row2;
        }
    }
    let n = (kernel * kernel) as f64;
    let window = |s: &[f64], y: usize, x: usize| {
        s[at(y + kernel, x + kernel)] - s[at(y, x + kernel)] - s[at(y + kernel, x)] + s[at(y, x)]
    };
    Array2::from_shape_fn((h, w), |(y, x)| {
        let m = window(&s1, y, x) / n;
        let var = window(&s2, y, x) / n - m * m;
        var.max(0.0).sqrt()
    })
}

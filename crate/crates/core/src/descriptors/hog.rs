//! Histogram of oriented gradients on a single plane.

use std::f64::consts::PI;

use ndarray::ArrayView2;

pub const HOG_EPS: f64 = 1e-6;

/// Central-difference gradient; zero on the one-pixel border.
pub fn gradients(plane: ArrayView2<'_, f64>) -> (ndarray::Array2<f64>, ndarray::Array2<f64>) {
    let (h, w) = plane.dim();
    let gx = ndarray::Array2::from_shape_fn((h, w), |(y, x)| {
        if x == 0 || x + 1 == w {
            0.0
        } else {
            plane[[y, x + 1]] - plane[[y, x - 1]]
        }
    });
    let gy = ndarray::Array2::from_shape_fn((h, w), |(y, x)| {
        if y == 0 || y + 1 == h {
            0.0
        } else {
            plane[[y + 1, x]] - plane[[y - 1, x]]
        }
    });
    (gx, gy)
}

/// Unsigned orientation in `[0, π)`.
pub fn unsigned_angle(gx: f64, gy: f64) -> f64 {
    let a = gy.atan2(gx);
    let a = if a < 0.0 { a + PI } else { a };
    if a >= PI {
        a - PI
    } else {
        a
    }
}

/// Cell histograms laid out `(cell_y, cell_x, bin)`, each L2-normalized.
/// Bin `b` is centred on `b·π/bins`; votes are split linearly between the two
/// nearest centres, wrapping around at π.
pub fn hog(plane: ArrayView2<'_, f64>, bins: usize, pool: usize) -> Vec<f64> {
    let (h, w) = plane.dim();
    let (ny, nx) = (h / pool, w / pool);
    let (gx, gy) = gradients(plane);
    let width = PI / bins as f64;
    let mut out = vec![0.0f64; ny * nx * bins];
    for y in 0..ny * pool {
        for x in 0..nx * pool {
            let (dx, dy) = (gx[[y, x]], gy[[y, x]]);
            let mag = (dx * dx + dy * dy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let pos = unsigned_angle(dx, dy) / width;
            let lo = pos.floor();
            let frac = pos - lo;
            let b0 = (lo as usize) % bins;
            let b1 = (b0 + 1) % bins;
            let cell = ((y / pool) * nx + x / pool) * bins;
            out[cell + b0] += mag * (1.0 - frac);
            out[cell + b1] += mag * frac;
        }
    }
    for cell in out.chunks_mut(bins) {
        let norm = cell.iter().map(|v| v * v).sum::<f64>().sqrt();
        cell.iter_mut().for_each(|v| *v /= norm + HOG_EPS);
    }
    out
}

//! 2-D cross-correlation (no kernel flip) via im2col.

use rayon::prelude::*;

use super::linalg::{gemm, gemm_nt, gemm_tn};
use super::{Primitive, Tensor};
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Real>(x: &[T], g: &Geometry) -> Vec<T> {
    let (n_out, k) = (g.col_cols(), g.k);
    let mut col = vec![T::zero(); g.col_rows() * n_out];
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let r = (c * k + ki) * k + kj;
                let dst = &mut col[r * n_out..(r + 1) * n_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im<T: Real>(col: &[T], g: &Geometry, dx: &mut [T]) {
    let (n_out, k) = (g.col_cols(), g.k);
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let r = (c * k + ki) * k + kj;
                let src = &col[r * n_out..(r + 1) * n_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Output extent of a convolution along one axis, `None` when not positive.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || kernel > input + 2 * pad {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

impl<T: Real> Tensor<T> {
    /// `x: B×C×H×W`, `w: F×C×k×k` → `B×F×H'×W'`.
    pub fn conv2d(&self, weight: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
        let (xs, ws) = (self.shape(), weight.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
            return Err(Error::shape("conv2d", xs, ws));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, k) = (ws[0], ws[2]);
        let (Some(ho), Some(wo)) = (
            conv_out_extent(h, k, stride, pad),
            conv_out_extent(w, k, stride, pad),
        ) else {
            return Err(Error::Config(format!(
                "conv2d: kernel {k} with stride {stride} and padding {pad} gives no output on {h}×{w}"
            )));
        };
        let geo = Geometry { c, h, w, k, stride, pad, ho, wo };
        let (in_sz, out_sz, ckk) = (c * h * w, f * ho * wo, geo.col_rows());

        let x = self.data();
        let wm = weight.data();
        let mut out = vec![T::zero(); b * out_sz];
        out.par_chunks_mut(out_sz).enumerate().for_each(|(i, o)| {
            let col = im2col(&x[i * in_sz..(i + 1) * in_sz], &geo);
            o.copy_from_slice(&gemm(wm, &col, f, ckk, ho * wo));
        });

        Ok(Tensor::from_op(
            out,
            vec![b, f, ho, wo],
            Primitive::Conv2d,
            vec![self.clone(), weight.clone()],
            Box::new(move |ctx| {
                let (x, wm) = (ctx.parents[0].data(), ctx.parents[1].data());
                let (need_x, need_w) = (ctx.needs[0], ctx.needs[1]);
                let per_sample: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..b)
                    .into_par_iter()
                    .map(|i| {
                        let g = &ctx.grad[i * out_sz..(i + 1) * out_sz];
                        let col = need_w.then(|| im2col(&x[i * in_sz..(i + 1) * in_sz], &geo));
                        let gw = col.map(|col| gemm_nt(g, &col, f, ho * wo, ckk));
                        let gx = need_x.then(|| {
                            let dcol = gemm_tn(wm, g, f, ckk, ho * wo);
                            let mut dx = vec![T::zero(); in_sz];
                            col2im(&dcol, &geo, &mut dx);
                            dx
                        });
                        (gx, gw)
                    })
                    .collect();
                let mut gx = need_x.then(|| Vec::with_capacity(b * in_sz));
                let mut gw = need_w.then(|| vec![T::zero(); f * ckk]);
                // fixed-order reduction over samples
                for (sx, sw) in per_sample {
                    if let (Some(acc), Some(sx)) = (gx.as_mut(), sx) {
                        acc.extend_from_slice(&sx);
                    }
                    if let (Some(acc), Some(sw)) = (gw.as_mut(), sw) {
                        for (a, v) in acc.iter_mut().zip(sw) {
                            *a += v;
                        }
                    }
                }
                vec![gx, gw]
            }),
        ))
    }
}

//! Matrix products and the `matmul` primitive.

use rayon::prelude::*;

use super::{Primitive, Tensor};
use crate::error::{Error, Result};
use crate::real::Real;

/// Work (multiply-adds) below which kernels stay on the calling thread.
const PAR_THRESHOLD: usize = 1 << 15;

/// `a (m×k) · b (k×n)`, row-major.
pub fn gemm<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    let row = |(i, orow): (usize, &mut [T])| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// `a (m×k) · bᵀ` where `b` is `n×k`.
pub fn gemm_nt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    let row = |(i, orow): (usize, &mut [T])| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            *o = s;
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// `aᵀ · b` where `a` is `k×m` and `b` is `k×n`.
pub fn gemm_tn<T: Real>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    let row = |(i, orow): (usize, &mut [T])| {
        for p in 0..k {
            let av = a[p * m + i];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

impl<T: Real> Tensor<T> {
    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = gemm(self.data(), other.data(), m, k, n);
        Ok(Tensor::from_op(
            data,
            vec![m, n],
            Primitive::MatMul,
            vec![self.clone(), other.clone()],
            Box::new(move |ctx| {
                let (a, b) = (ctx.parents[0].data(), ctx.parents[1].data());
                let ga = ctx.needs[0].then(|| gemm_nt(ctx.grad, b, m, n, k));
                let gb = ctx.needs[1].then(|| gemm_tn(a, ctx.grad, m, k, n));
                vec![ga, gb]
            }),
        ))
    }
}

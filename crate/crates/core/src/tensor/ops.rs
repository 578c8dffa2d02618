//! Elementwise, broadcasting, reduction and distance primitives.

use rayon::prelude::*;

use super::linalg::gemm;
use super::{numel, Primitive, Tensor};
use crate::error::{Error, Result};
use crate::real::Real;

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out`, zero along broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let pad = rank - shape.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + pad] = if shape[i] == 1 && out[i + pad] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Calls `visit(out_index, a_offset, b_offset)` for every output element in
/// row-major order.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut visit: impl FnMut(usize, usize, usize),
) {
    let rank = out.len();
    let total = numel(out);
    if rank == 0 {
        visit(0, 0, 0);
        return;
    }
    let last = out[rank - 1];
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut k = 0;
    while k < total {
        for j in 0..last {
            visit(k + j, oa + j * la, ob + j * lb);
        }
        k += last;
        // odometer over the outer axes
        let mut d = rank - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn zip_broadcast<T: Real>(
    a: &[T],
    ash: &[usize],
    b: &[T],
    bsh: &[usize],
    out: &[usize],
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    if ash == bsh {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let sa = broadcast_strides(ash, out);
    let sb = broadcast_strides(bsh, out);
    let mut res = vec![T::zero(); numel(out)];
    for_each_broadcast(out, &sa, &sb, |k, ia, ib| res[k] = f(a[ia], b[ib]));
    res
}

/// Sums `g` (laid out as `from`) down to `target`, which must broadcast to `from`.
pub(crate) fn reduce_to<T: Real>(g: &[T], from: &[usize], target: &[usize]) -> Vec<T> {
    if from == target {
        return g.to_vec();
    }
    let st = broadcast_strides(target, from);
    let zero = vec![0; from.len()];
    let mut res = vec![T::zero(); numel(target)];
    for_each_broadcast(from, &st, &zero, |k, it, _| res[it] += g[k]);
    res
}

/// Repeats `g` (laid out as `small`) to fill `big`.
fn expand_to<T: Real>(g: &[T], small: &[usize], big: &[usize]) -> Vec<T> {
    if small == big {
        return g.to_vec();
    }
    let ss = broadcast_strides(small, big);
    let zero = vec![0; big.len()];
    let mut res = vec![T::zero(); numel(big)];
    for_each_broadcast(big, &ss, &zero, |k, is, _| res[k] = g[is]);
    res
}

impl<T: Real> Tensor<T> {
    fn binary(
        &self,
        other: &Tensor<T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Vec<T>, Vec<usize>)> {
        let out = broadcast_shape(self.shape(), other.shape())
            .ok_or_else(|| Error::shape(name, self.shape(), other.shape()))?;
        let data = zip_broadcast(self.data(), self.shape(), other.data(), other.shape(), &out, f);
        Ok((data, out))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (data, out) = self.binary(other, "add", |x, y| x + y)?;
        let oshape = out.clone();
        Ok(Tensor::from_op(
            data,
            out,
            Primitive::Add,
            vec![self.clone(), other.clone()],
            Box::new(move |ctx| {
                ctx.parents
                    .iter()
                    .zip(ctx.needs)
                    .map(|(p, &need)| need.then(|| reduce_to(ctx.grad, &oshape, p.shape())))
                    .collect()
            }),
        ))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (data, out) = self.binary(other, "sub", |x, y| x - y)?;
        let oshape = out.clone();
        Ok(Tensor::from_op(
            data,
            out,
            Primitive::Sub,
            vec![self.clone(), other.clone()],
            Box::new(move |ctx| {
                let ga = ctx.needs[0].then(|| reduce_to(ctx.grad, &oshape, ctx.parents[0].shape()));
                let gb = ctx.needs[1].then(|| {
                    let neg: Vec<T> = ctx.grad.iter().map(|&g| -g).collect();
                    reduce_to(&neg, &oshape, ctx.parents[1].shape())
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (data, out) = self.binary(other, "mul", |x, y| x * y)?;
        let oshape = out.clone();
        Ok(Tensor::from_op(
            data,
            out,
            Primitive::Mul,
            vec![self.clone(), other.clone()],
            Box::new(move |ctx| {
                let (a, b) = (&ctx.parents[0], &ctx.parents[1]);
                let ga = ctx.needs[0].then(|| {
                    let full = zip_broadcast(ctx.grad, &oshape, b.data(), b.shape(), &oshape, |g, y| g * y);
                    reduce_to(&full, &oshape, a.shape())
                });
                let gb = ctx.needs[1].then(|| {
                    let full = zip_broadcast(ctx.grad, &oshape, a.data(), a.shape(), &oshape, |g, x| g * x);
                    reduce_to(&full, &oshape, b.shape())
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (data, out) = self.binary(other, "div", |x, y| x / y)?;
        let oshape = out.clone();
        Ok(Tensor::from_op(
            data,
            out,
            Primitive::Div,
            vec![self.clone(), other.clone()],
            Box::new(move |ctx| {
                let (a, b) = (&ctx.parents[0], &ctx.parents[1]);
                let ga = ctx.needs[0].then(|| {
                    let full = zip_broadcast(ctx.grad, &oshape, b.data(), b.shape(), &oshape, |g, y| g / y);
                    reduce_to(&full, &oshape, a.shape())
                });
                let gb = ctx.needs[1].then(|| {
                    // d(a/b)/db = -out / b
                    let q = zip_broadcast(ctx.out, &oshape, b.data(), b.shape(), &oshape, |o, y| o / y);
                    let full: Vec<T> = ctx.grad.iter().zip(&q).map(|(&g, &q)| -g * q).collect();
                    reduce_to(&full, &oshape, b.shape())
                });
                vec![ga, gb]
            }),
        ))
    }

    fn unary(
        &self,
        op: Primitive,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            op,
            vec![self.clone()],
            Box::new(move |ctx| {
                let x = ctx.parents[0].data();
                vec![Some(
                    ctx.grad
                        .iter()
                        .zip(x.iter().zip(ctx.out))
                        .map(|(&g, (&x, &y))| g * df(x, y))
                        .collect(),
                )]
            }),
        )
    }

    pub fn scale(&self, c: T) -> Tensor<T> {
        self.unary(Primitive::Scale, move |x| x * c, move |_, _| c)
    }

    pub fn neg(&self) -> Tensor<T> {
        self.scale(-T::one())
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        self.unary(Primitive::AddScalar, move |x| x + c, |_, _| T::one())
    }

    /// `max(x, 0)`; the subgradient at the kink is 0.
    pub fn relu(&self) -> Tensor<T> {
        self.unary(
            Primitive::Relu,
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    /// `max(x, c)`; the subgradient at the kink is 0.
    pub fn max_scalar(&self, c: T) -> Tensor<T> {
        self.unary(
            Primitive::MaxScalar,
            move |x| if x > c { x } else { c },
            move |x, _| if x > c { T::one() } else { T::zero() },
        )
    }

    pub fn square(&self) -> Tensor<T> {
        self.unary(Primitive::Square, |x| x * x, |x, _| x + x)
    }

    /// `sqrt(x + eps)`; finite gradient at zero for `eps > 0`.
    pub fn sqrt_stable(&self, eps: T) -> Tensor<T> {
        let half = T::of(0.5);
        self.unary(Primitive::SqrtStable, move |x| (x + eps).sqrt(), move |_, y| half / y)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            Primitive::Reshape,
            vec![self.clone()],
            Box::new(|ctx| vec![Some(ctx.grad.to_vec())]),
        ))
    }

    fn reduce(&self, axes: &[usize], keepdim: bool, mean: bool) -> Result<Tensor<T>> {
        let shape = self.shape().to_vec();
        if axes.iter().any(|&a| a >= shape.len()) {
            return Err(Error::Contract(format!(
                "reduction axes {axes:?} out of range for shape {shape:?}"
            )));
        }
        let mut kept = shape.clone();
        for &a in axes {
            kept[a] = 1;
        }
        let count: usize = axes
            .iter()
            .collect::<std::collections::BTreeSet<_>>()
            .iter()
            .map(|&&a| shape[a])
            .product();
        let mut data = reduce_to(self.data(), &shape, &kept);
        let factor = if mean { T::one() / T::of(count as f64) } else { T::one() };
        if mean {
            data.iter_mut().for_each(|v| *v *= factor);
        }
        let out_shape = if keepdim {
            kept.clone()
        } else {
            let s: Vec<usize> = shape
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect();
            if s.is_empty() {
                vec![1]
            } else {
                s
            }
        };
        let op = if mean { Primitive::Mean } else { Primitive::Sum };
        Ok(Tensor::from_op(
            data,
            out_shape,
            op,
            vec![self.clone()],
            Box::new(move |ctx| {
                let mut g = expand_to(ctx.grad, &kept, &shape);
                if mean {
                    g.iter_mut().for_each(|v| *v *= factor);
                }
                vec![Some(g)]
            }),
        ))
    }

    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor<T>> {
        self.reduce(axes, keepdim, false)
    }

    pub fn mean_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor<T>> {
        self.reduce(axes, keepdim, true)
    }

    pub fn sum_all(&self) -> Tensor<T> {
        let axes: Vec<usize> = (0..self.ndim()).collect();
        self.reduce(&axes, false, false).expect("valid axes")
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let axes: Vec<usize> = (0..self.ndim()).collect();
        self.reduce(&axes, false, true).expect("valid axes")
    }

    /// Squared Euclidean distances between the rows of a `B×D` matrix.
    /// Each entry is summed directly so the result is exactly symmetric with
    /// an exactly zero diagonal.
    pub fn pairwise_sq_dist(&self) -> Result<Tensor<T>> {
        if self.ndim() != 2 {
            return Err(Error::shape("pairwise_sq_dist", self.shape(), &[0, 0]));
        }
        let (b, d) = (self.shape()[0], self.shape()[1]);
        let x = self.data();
        let mut out = vec![T::zero(); b * b];
        out.par_chunks_mut(b).enumerate().for_each(|(i, row)| {
            let xi = &x[i * d..(i + 1) * d];
            for (j, slot) in row.iter_mut().enumerate() {
                if i == j {
                    continue;
                }
                let xj = &x[j * d..(j + 1) * d];
                let mut s = T::zero();
                for (&p, &q) in xi.iter().zip(xj) {
                    let t = p - q;
                    s += t * t;
                }
                *slot = s;
            }
        });
        Ok(Tensor::from_op(
            out,
            vec![b, b],
            Primitive::PairwiseSqDist,
            vec![self.clone()],
            Box::new(move |ctx| {
                // dX = 2 (diag(H 1) X - H X) with H = G + G^T
                let g = ctx.grad;
                let x = ctx.parents[0].data();
                let mut h = vec![T::zero(); b * b];
                for i in 0..b {
                    for j in 0..b {
                        h[i * b + j] = g[i * b + j] + g[j * b + i];
                    }
                }
                let hx = gemm(&h, x, b, b, d);
                let two = T::of(2.0);
                let mut dx = vec![T::zero(); b * d];
                for i in 0..b {
                    let rs: T = h[i * b..(i + 1) * b].iter().copied().sum();
                    for k in 0..d {
                        dx[i * d + k] = two * (rs * x[i * d + k] - hx[i * d + k]);
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Mean softmax cross-entropy of `N×C` logits against class indices.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Tensor<T>> {
        if self.ndim() != 2 || self.shape()[0] != labels.len() {
            return Err(Error::shape("cross_entropy", self.shape(), &[labels.len()]));
        }
        let (n, c) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Data(format!("label {bad} out of range for {c} classes")));
        }
        let z = self.data();
        let mut probs = vec![T::zero(); n * c];
        let mut loss = T::zero();
        for i in 0..n {
            let row = &z[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for k in 0..c {
                let e = (row[k] - m).exp();
                probs[i * c + k] = e;
                s += e;
            }
            for k in 0..c {
                probs[i * c + k] /= s;
            }
            loss += m + s.ln() - row[labels[i]];
        }
        let inv_n = T::one() / T::of(n as f64);
        let labels = labels.to_vec();
        Ok(Tensor::from_op(
            vec![loss * inv_n],
            vec![1],
            Primitive::CrossEntropy,
            vec![self.clone()],
            Box::new(move |ctx| {
                let g = ctx.grad[0] * inv_n;
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * c + l] -= T::one();
                }
                d.iter_mut().for_each(|v| *v *= g);
                vec![Some(d)]
            }),
        ))
    }
}

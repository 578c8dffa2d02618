//! Distance covariance and distance correlation for batches of vectors.
//!
//! For a batch `X` (`B×D`) and `Y` (`B×D′`, `D′` may differ from `D`), the
//! pairwise Euclidean distance matrices are double centered,
//! `A_ji = a_ji − ā_j· − ā_·i + ā_··`, and
//!
//! ```text
//! dCov²(X, Y) = (1/B²) Σ_j Σ_i A_ji C_ji
//! dCor(X, Y)  = dCov²(X, Y) / sqrt(dVar(X) · dVar(Y)),   dVar(X) = dCov²(X, X)
//! ```
//!
//! This is the plain V-statistic (no bias correction). Two routes are
//! provided: a differentiable one on [`Tensor`]s used by the losses, and an
//! exact `f64` statistic on `ndarray` matrices used for evaluation and
//! diagnostics.

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Tensor, SQRT_EPS};

/// Smoothing term in the differentiable denominator and degeneracy threshold
/// of the statistic.
pub const DCOR_EPS: f64 = 1e-12;

fn check_batch(op: &'static str, b: usize) -> Result<()> {
    if b < 2 {
        return Err(Error::BatchTooSmall { op, got: b, need: 2 });
    }
    Ok(())
}

fn check_pair(op: &'static str, x: &[usize], y: &[usize]) -> Result<()> {
    if x.len() != 2 || y.len() != 2 || x[0] != y[0] {
        return Err(Error::shape(op, x, y));
    }
    check_batch(op, x[0])
}

// ---------------------------------------------------------------------------
// Differentiable route
// ---------------------------------------------------------------------------

/// `sqrt_stable(‖x_j − x_i‖²)` for every pair of rows; the diagonal is
/// `sqrt(SQRT_EPS)`.
pub fn pairwise_distances<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.ndim() != 2 {
        return Err(Error::shape("pairwise_distances", x.shape(), &[0, 0]));
    }
    check_batch("pairwise_distances", x.shape()[0])?;
    Ok(x.pairwise_sq_dist()?.sqrt_stable(T::of(SQRT_EPS)))
}

/// Subtracts row means and column means and adds back the grand mean.
pub fn double_center<T: Real>(m: &Tensor<T>) -> Result<Tensor<T>> {
    let s = m.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::shape("double_center", s, &[s[0], s[0]]));
    }
    let rows = m.mean_axes(&[1], true)?;
    let cols = m.mean_axes(&[0], true)?;
    m.sub(&rows)?.sub(&cols)?.add(&m.mean_all())
}

/// Double-centered distance matrix of a batch.
pub fn centered_distances<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    double_center(&pairwise_distances(x)?)
}

/// Differentiable squared distance covariance.
pub fn dcov2<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    check_pair("dcov2", x.shape(), y.shape())?;
    centered_distances(x)?.mul(&centered_distances(y)?).map(|p| p.mean_all())
}

/// Distance correlation from two already centered matrices, with denominator
/// `sqrt(dVar(X)·dVar(Y) + DCOR_EPS)`.
pub fn dcor_centered<T: Real>(a: &Tensor<T>, c: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != c.shape() {
        return Err(Error::shape("dcor", a.shape(), c.shape()));
    }
    let cov = a.mul(c)?.mean_all();
    let var_a = a.square().mean_all();
    let var_c = c.square().mean_all();
    let den = var_a.mul(&var_c)?.sqrt_stable(T::of(DCOR_EPS));
    cov.div(&den)
}

/// Differentiable distance correlation; gradient is finite even when one
/// argument has identical rows.
pub fn dcor_loss<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    check_pair("dcor", x.shape(), y.shape())?;
    dcor_centered(&centered_distances(x)?, &centered_distances(y)?)
}

// ---------------------------------------------------------------------------
// Statistic route
// ---------------------------------------------------------------------------

/// Exact Euclidean distance matrix between rows (zero diagonal). Every entry
/// is summed independently, so the result is exactly symmetric.
pub fn distance_matrix(x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let b = x.nrows();
    check_batch("distance_matrix", b)?;
    let mut out = vec![0.0; b * b];
    out.par_chunks_mut(b).enumerate().for_each(|(j, row)| {
        let xj = x.row(j);
        for (i, slot) in row.iter_mut().enumerate() {
            if i != j {
                *slot = xj
                    .iter()
                    .zip(x.row(i))
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum::<f64>()
                    .sqrt();
            }
        }
    });
    let out = Array2::from_shape_vec((b, b), out).expect("b*b entries");
    Ok(out)
}

/// Double-centered distance matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CenteredDistanceMatrix {
    values: Array2<f64>,
    source_shape: (usize, usize),
}

impl CenteredDistanceMatrix {
    pub fn from_points(x: ArrayView2<'_, f64>) -> Result<Self> {
        let shape = x.dim();
        let mut m = Self::from_distances(distance_matrix(x)?)?;
        m.source_shape = shape;
        Ok(m)
    }

    /// Centers an arbitrary square matrix.
    pub fn from_distances(m: Array2<f64>) -> Result<Self> {
        let (r, c) = m.dim();
        if r != c || r == 0 {
            return Err(Error::shape("double_center", &[r, c], &[r, r]));
        }
        let row_means = m.mean_axis(Axis(1)).expect("non-empty");
        let col_means = m.mean_axis(Axis(0)).expect("non-empty");
        let grand = m.mean().expect("non-empty");
        let mut values = m;
        for ((j, i), v) in values.indexed_iter_mut() {
            *v = *v - row_means[j] - col_means[i] + grand;
        }
        Ok(CenteredDistanceMatrix {
            values,
            source_shape: (r, 0),
        })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    /// `(B, D)` of the batch the distances came from.
    pub fn source_shape(&self) -> (usize, usize) {
        self.source_shape
    }

    pub fn batch(&self) -> usize {
        self.values.nrows()
    }

    /// `(1/B²) Σ A_ji C_ji`.
    pub fn dcov2(&self, other: &CenteredDistanceMatrix) -> Result<f64> {
        if self.batch() != other.batch() {
            return Err(Error::shape(
                "dcov2",
                &[self.batch(), self.source_shape.1],
                &[other.batch(), other.source_shape.1],
            ));
        }
        let b = self.batch() as f64;
        let s: f64 = self
            .values
            .iter()
            .zip(other.values.iter())
            .map(|(a, c)| a * c)
            .sum();
        Ok(s / (b * b))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DcorResult {
    pub dcor: f64,
    pub dcov2: f64,
    pub dvar_x: f64,
    pub dvar_y: f64,
    /// One of the distance variances is at or below [`DCOR_EPS`]; `dcor` is 0.
    pub degenerate: bool,
}

impl DcorResult {
    pub fn from_centered(a: &CenteredDistanceMatrix, c: &CenteredDistanceMatrix) -> Result<Self> {
        let dcov2 = a.dcov2(c)?;
        let dvar_x = a.dcov2(a)?;
        let dvar_y = c.dcov2(c)?;
        let degenerate = dvar_x <= DCOR_EPS || dvar_y <= DCOR_EPS;
        let dcor = if degenerate {
            0.0
        } else {
            (dcov2 / (dvar_x * dvar_y).sqrt()).max(0.0)
        };
        Ok(DcorResult {
            dcor,
            dcov2,
            dvar_x,
            dvar_y,
            degenerate,
        })
    }
}

pub fn dcov2_stat(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Result<f64> {
    check_pair("dcov2", &[x.nrows(), x.ncols()], &[y.nrows(), y.ncols()])?;
    CenteredDistanceMatrix::from_points(x)?.dcov2(&CenteredDistanceMatrix::from_points(y)?)
}

pub fn dcor_stat(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Result<DcorResult> {
    check_pair("dcor", &[x.nrows(), x.ncols()], &[y.nrows(), y.ncols()])?;
    DcorResult::from_centered(
        &CenteredDistanceMatrix::from_points(x)?,
        &CenteredDistanceMatrix::from_points(y)?,
    )
}

//! Batch normalization over the batch axis (rank 2) or batch×spatial axes (rank 4).

use super::{Primitive, Tensor};
use crate::error::{Error, Result};
use crate::real::Real;

/// Variance stabilizer inside the batch-norm square root.
pub const BN_EPS: f64 = 1e-5;

pub enum BatchNormMode<'a, T> {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with supplied running statistics.
    Eval { mean: &'a [T], var: &'a [T] },
}

pub struct BatchNormOutput<T: Real> {
    pub output: Tensor<T>,
    /// Per-channel batch mean (train mode only).
    pub batch_mean: Option<Vec<T>>,
    /// Per-channel biased batch variance (train mode only).
    pub batch_var: Option<Vec<T>>,
}

fn layout(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match shape.len() {
        2 => Some((shape[0], shape[1], 1)),
        4 => Some((shape[0], shape[1], shape[2] * shape[3])),
        _ => None,
    }
}

impl<T: Real> Tensor<T> {
    /// Normalizes each channel (axis 1) and applies the optional affine map
    /// `gamma * x̂ + beta`.
    pub fn batch_norm(
        &self,
        gamma: Option<&Tensor<T>>,
        beta: Option<&Tensor<T>>,
        mode: BatchNormMode<'_, T>,
        eps: T,
    ) -> Result<BatchNormOutput<T>> {
        let Some((n, c, s)) = layout(self.shape()) else {
            return Err(Error::shape("batch_norm", self.shape(), &[0, 0]));
        };
        for p in [gamma, beta].into_iter().flatten() {
            if p.numel() != c {
                return Err(Error::shape("batch_norm affine", self.shape(), p.shape()));
            }
        }
        let train = matches!(mode, BatchNormMode::Train);
        if train && n < 2 {
            return Err(Error::BatchTooSmall {
                op: "batch_norm (train mode)",
                got: n,
                need: 2,
            });
        }
        let x = self.data();
        let m = T::of((n * s) as f64);
        let (mean, var) = match mode {
            BatchNormMode::Train => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * s;
                        mean[ch] += x[base..base + s].iter().copied().sum::<T>();
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m);
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * s;
                        var[ch] += x[base..base + s]
                            .iter()
                            .map(|&v| (v - mean[ch]) * (v - mean[ch]))
                            .sum::<T>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= m);
                (mean, var)
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm running stats", &[c], &[mean.len()]));
                }
                (mean.to_vec(), var.to_vec())
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g: Vec<T> = gamma.map(|t| t.to_vec()).unwrap_or_else(|| vec![T::one(); c]);
        let bt: Vec<T> = beta.map(|t| t.to_vec()).unwrap_or_else(|| vec![T::zero(); c]);

        let mut out = vec![T::zero(); x.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * s;
                for i in base..base + s {
                    out[i] = g[ch] * (x[i] - mean[ch]) * inv_std[ch] + bt[ch];
                }
            }
        }

        let mut parents = vec![self.clone()];
        parents.extend(gamma.cloned());
        parents.extend(beta.cloned());
        let (has_gamma, has_beta) = (gamma.is_some(), beta.is_some());
        let (mean_c, inv_c) = (mean.clone(), inv_std.clone());
        let output = Tensor::from_op(
            out,
            self.shape().to_vec(),
            Primitive::BatchNorm,
            parents,
            Box::new(move |ctx| {
                let x = ctx.parents[0].data();
                let dy = ctx.grad;
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * s;
                        for i in base..base + s {
                            let xh = (x[i] - mean_c[ch]) * inv_c[ch];
                            sum_dy[ch] += dy[i];
                            sum_dy_xhat[ch] += dy[i] * xh;
                        }
                    }
                }
                let mut res = Vec::with_capacity(ctx.parents.len());
                res.push(ctx.needs[0].then(|| {
                    let mut dx = vec![T::zero(); x.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * s;
                            let k = g[ch] * inv_c[ch];
                            for i in base..base + s {
                                dx[i] = if train {
                                    let xh = (x[i] - mean_c[ch]) * inv_c[ch];
                                    k * (dy[i] - sum_dy[ch] / m - xh * sum_dy_xhat[ch] / m)
                                } else {
                                    k * dy[i]
                                };
                            }
                        }
                    }
                    dx
                }));
                if has_gamma {
                    res.push(ctx.needs[1].then(|| sum_dy_xhat.clone()));
                }
                if has_beta {
                    res.push(ctx.needs[res.len()].then(|| sum_dy.clone()));
                }
                res
            }),
        );
        Ok(BatchNormOutput {
            output,
            batch_mean: train.then_some(mean),
            batch_var: train.then_some(var),
        })
    }
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
}

impl<T: Real> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::of(0.1),
        }
    }

    /// Applies batch norm and, in train mode, folds the batch statistics into
    /// the running estimates: `r ← (1 − momentum)·r + momentum·batch`. The
    /// running variance uses the unbiased batch variance.
    pub fn forward(
        &mut self,
        x: &Tensor<T>,
        gamma: Option<&Tensor<T>>,
        beta: Option<&Tensor<T>>,
        train: bool,
    ) -> Result<Tensor<T>> {
        let eps = T::of(BN_EPS);
        if !train {
            return self.forward_eval(x, gamma, beta);
        }
        let out = x.batch_norm(gamma, beta, BatchNormMode::Train, eps)?;
        let (n, _, s) = layout(x.shape()).expect("validated by batch_norm");
        let m = (n * s) as f64;
        let unbias = T::of(m / (m - 1.0).max(1.0));
        let mom = self.momentum;
        let keep = T::one() - mom;
        for (r, &b) in self.running_mean.iter_mut().zip(out.batch_mean.as_ref().unwrap()) {
            *r = keep * *r + mom * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(out.batch_var.as_ref().unwrap()) {
            *r = keep * *r + mom * b * unbias;
        }
        Ok(out.output)
    }

    pub fn forward_eval(
        &self,
        x: &Tensor<T>,
        gamma: Option<&Tensor<T>>,
        beta: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let mode = BatchNormMode::Eval {
            mean: &self.running_mean,
            var: &self.running_var,
        };
        Ok(x.batch_norm(gamma, beta, mode, T::of(BN_EPS))?.output)
    }
}

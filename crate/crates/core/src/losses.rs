//! The training objective: agreement and spread of the two views' embeddings
//! plus distance-correlation terms between the views and towards each fixed
//! representation.
//!
//! ```text
//! L1 = λ·mse(Z, Z̃) + μ·(v(Z) + v(Z̃))
//! L2 = α·(1 − dCor(Z̃, Z))
//! L3 = Σ_k β_k·(1 − dCor(Z̃, Z*_k))
//! ```
//!
//! with `v(Z) = (1/D) Σ_d max(0, γ − sqrt(Var(z_d) + ε))` over the population
//! variance of each column.

use serde::{Deserialize, Serialize};

use crate::depmeasure::{centered_distances, dcor_centered};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda: f64,
    pub mu: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 1.0,
            mu: 1.0,
            alpha: 1.0,
            gamma: 1.0,
            eps: 1e-4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda", self.lambda),
            ("mu", self.mu),
            ("alpha", self.alpha),
            ("gamma", self.gamma),
            ("eps", self.eps),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss.{name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// A fixed dependence target `Z*_k` with its weight `β_k`.
#[derive(Clone, Debug)]
pub struct Target<T: Real> {
    pub name: String,
    pub values: Tensor<T>,
    pub beta: f64,
}

impl<T: Real> Target<T> {
    /// Wraps constant values; any gradient tracking is dropped.
    pub fn new(name: impl Into<String>, values: &Tensor<T>, beta: f64) -> Self {
        Target {
            name: name.into(),
            values: values.detach(),
            beta,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub mse: f64,
    pub var_z: f64,
    pub var_zt: f64,
    pub dcor_zz: f64,
    /// `(name, dCor(Z̃, Z*_k))` in target order.
    pub dcor_desc: Vec<(String, f64)>,
}

impl LossBreakdown {
    /// Weighted sum of the components; `betas` follows `dcor_desc`.
    pub fn resum(&self, w: &LossWeights, betas: &[f64]) -> f64 {
        let l3: f64 = self
            .dcor_desc
            .iter()
            .zip(betas)
            .map(|((_, d), b)| b * (1.0 - d))
            .sum();
        w.lambda * self.mse + w.mu * (self.var_z + self.var_zt) + w.alpha * (1.0 - self.dcor_zz) + l3
    }
}

fn check_same(op: &'static str, a: &Tensor<impl Real>, b: &Tensor<impl Real>) -> Result<()> {
    if a.shape() != b.shape() || a.ndim() != 2 {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// `(1/B)·Σ_i ‖z_i − z̃_i‖²`.
pub fn mse_term<T: Real>(z: &Tensor<T>, zt: &Tensor<T>) -> Result<Tensor<T>> {
    check_same("mse_term", z, zt)?;
    let b = z.shape()[0] as f64;
    Ok(z.sub(zt)?.square().sum_all().scale(T::of(1.0 / b)))
}

/// `(1/D)·Σ_d max(0, γ − sqrt(Var(z_d) + ε))`.
pub fn variance_term<T: Real>(z: &Tensor<T>, gamma: f64, eps: f64) -> Result<Tensor<T>> {
    if z.ndim() != 2 {
        return Err(Error::shape("variance_term", z.shape(), &[0, 0]));
    }
    if z.shape()[0] < 2 {
        return Err(Error::BatchTooSmall {
            op: "variance_term",
            got: z.shape()[0],
            need: 2,
        });
    }
    let centered = z.sub(&z.mean_axes(&[0], true)?)?;
    let std = centered.square().mean_axes(&[0], false)?.sqrt_stable(T::of(eps));
    Ok(std.neg().add_scalar(T::of(gamma)).max_scalar(T::zero()).mean_all())
}

pub fn loss1<T: Real>(z: &Tensor<T>, zt: &Tensor<T>, w: &LossWeights) -> Result<Tensor<T>> {
    let mse = mse_term(z, zt)?.scale(T::of(w.lambda));
    let var = variance_term(z, w.gamma, w.eps)?.add(&variance_term(zt, w.gamma, w.eps)?)?;
    mse.add(&var.scale(T::of(w.mu)))
}

fn one_minus<T: Real>(d: &Tensor<T>, weight: f64) -> Tensor<T> {
    d.neg().add_scalar(T::one()).scale(T::of(weight))
}

pub fn loss2<T: Real>(z: &Tensor<T>, zt: &Tensor<T>, alpha: f64) -> Result<Tensor<T>> {
    check_same("loss2", z, zt)?;
    let d = dcor_centered(&centered_distances(zt)?, &centered_distances(z)?)?;
    Ok(one_minus(&d, alpha))
}

fn check_target<T: Real>(zt: &Tensor<T>, t: &Target<T>) -> Result<()> {
    if t.values.ndim() != 2 || t.values.shape()[0] != zt.shape()[0] {
        return Err(Error::Data(format!(
            "target {} has shape {:?} but the batch has {} rows",
            t.name,
            t.values.shape(),
            zt.shape()[0]
        )));
    }
    Ok(())
}

pub fn loss3<T: Real>(zt: &Tensor<T>, targets: &[Target<T>]) -> Result<Tensor<T>> {
    let a = centered_distances(zt)?;
    let mut total = Tensor::scalar(T::zero());
    for t in targets {
        check_target(zt, t)?;
        let d = dcor_centered(&a, &centered_distances(&t.values)?)?;
        total = total.add(&one_minus(&d, t.beta))?;
    }
    Ok(total)
}

/// The full objective as a differentiable scalar plus the per-term values.
/// `breakdown.total` is the weighted re-sum of the reported components.
pub fn total_loss<T: Real>(
    z: &Tensor<T>,
    zt: &Tensor<T>,
    targets: &[Target<T>],
    w: &LossWeights,
) -> Result<(Tensor<T>, LossBreakdown)> {
    check_same("total_loss", z, zt)?;
    let mse = mse_term(z, zt)?;
    let var_z = variance_term(z, w.gamma, w.eps)?;
    let var_zt = variance_term(zt, w.gamma, w.eps)?;
    let c_zt = centered_distances(zt)?;
    let dcor_zz = dcor_centered(&c_zt, &centered_distances(z)?)?;

    let mut total = mse
        .scale(T::of(w.lambda))
        .add(&var_z.add(&var_zt)?.scale(T::of(w.mu)))?
        .add(&one_minus(&dcor_zz, w.alpha))?;
    let mut dcor_desc = Vec::with_capacity(targets.len());
    let mut betas = Vec::with_capacity(targets.len());
    for t in targets {
        check_target(zt, t)?;
        let d = dcor_centered(&c_zt, &centered_distances(&t.values)?)?;
        total = total.add(&one_minus(&d, t.beta))?;
        dcor_desc.push((t.name.clone(), d.item().f64()));
        betas.push(t.beta);
    }
    let mut breakdown = LossBreakdown {
        total: 0.0,
        mse: mse.item().f64(),
        var_z: var_z.item().f64(),
        var_zt: var_zt.item().f64(),
        dcor_zz: dcor_zz.item().f64(),
        dcor_desc,
    };
    breakdown.total = breakdown.resum(w, &betas);
    Ok((total, breakdown))
}

//! Central finite-difference gradient verification (fp64).

use super::Tensor;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Coordinate with the largest error.
    pub worst: Option<usize>,
    pub checked: usize,
    /// Coordinates excluded as kinks.
    pub skipped: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub h: f64,
    /// Exclude coordinates with `|x_i| < 10 h`, where relu/hinge kinks at 0 live.
    pub skip_kinks: bool,
}

impl GradCheck {
    pub fn new(h: f64) -> Self {
        GradCheck {
            h,
            skip_kinks: false,
        }
    }

    pub fn skip_kinks(mut self, yes: bool) -> Self {
        self.skip_kinks = yes;
        self
    }

    /// Compares the analytic gradient of scalar `f` at `x` against central
    /// differences `(f(x+h e) − f(x−h e)) / 2h`; the error per coordinate is
    /// `|a − n| / max(|a|, |n|, 1e-8)`.
    pub fn run<F>(&self, f: F, x: &Tensor<f64>) -> Result<GradCheckReport>
    where
        F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
    {
        let shape = x.shape().to_vec();
        let base = x.to_vec();
        let leaf = Tensor::leaf(base.clone(), &shape, true)?;
        let analytic = f(&leaf)?.backward()?.get(&leaf);

        let eval = |v: Vec<f64>| -> Result<f64> { Ok(f(&Tensor::new(v, &shape)?)?.item()) };
        let mut report = GradCheckReport {
            max_rel_err: 0.0,
            worst: None,
            checked: 0,
            skipped: 0,
        };
        for i in 0..base.len() {
            if self.skip_kinks && base[i].abs() < 10.0 * self.h {
                report.skipped += 1;
                continue;
            }
            let mut plus = base.clone();
            plus[i] += self.h;
            let mut minus = base.clone();
            minus[i] -= self.h;
            let numeric = (eval(plus)? - eval(minus)?) / (2.0 * self.h);
            let a = analytic[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some(i);
            }
        }
        Ok(report)
    }
}

/// Maximum relative error between analytic and central-difference gradients.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    Ok(GradCheck::new(h).run(f, x)?.max_rel_err)
}

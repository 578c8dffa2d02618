//! Order-2 wavelet scattering with a Morlet filter bank and periodic
//! convolution in the Fourier domain.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::ArrayView2;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Number of scattering channels produced per input plane.
pub fn channel_count(j: usize, l: usize) -> usize {
    1 + j * l + l * l * j * j.saturating_sub(1) / 2
}

struct Fft2 {
    h: usize,
    w: usize,
    fwd_rows: Arc<dyn Fft<f64>>,
    fwd_cols: Arc<dyn Fft<f64>>,
    inv_rows: Arc<dyn Fft<f64>>,
    inv_cols: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    fn new(h: usize, w: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            h,
            w,
            fwd_rows: planner.plan_fft_forward(w),
            fwd_cols: planner.plan_fft_forward(h),
            inv_rows: planner.plan_fft_inverse(w),
            inv_cols: planner.plan_fft_inverse(h),
        }
    }

    fn run(&self, buf: &mut [Complex64], rows: &dyn Fft<f64>, cols: &dyn Fft<f64>) {
        let (h, w) = (self.h, self.w);
        rows.process(buf);
        let mut t = vec![Complex64::default(); h * w];
        for y in 0..h {
            for x in 0..w {
                t[x * h + y] = buf[y * w + x];
            }
        }
        cols.process(&mut t);
        for y in 0..h {
            for x in 0..w {
                buf[y * w + x] = t[x * h + y];
            }
        }
    }

    fn forward(&self, buf: &mut [Complex64]) {
        self.run(buf, &*self.fwd_rows, &*self.fwd_cols);
    }

    /// Normalized inverse.
    fn inverse(&self, buf: &mut [Complex64]) {
        self.run(buf, &*self.inv_rows, &*self.inv_cols);
        let s = 1.0 / (self.h * self.w) as f64;
        buf.iter_mut().for_each(|v| *v *= s);
    }
}

/// Periodized anisotropic Gabor filter centred on the origin of an `h×w` grid.
fn gabor(h: usize, w: usize, sigma: f64, theta: f64, xi: f64, slant: f64) -> Vec<Complex64> {
    let (c, s) = (theta.cos(), theta.sin());
    // R · diag(1, slant²) · R⁻¹ / (2σ²)
    let k = 1.0 / (2.0 * sigma * sigma);
    let s2 = slant * slant;
    let a = k * (c * c + s2 * s * s);
    let b = k * 2.0 * c * s * (1.0 - s2);
    let d = k * (s * s + s2 * c * c);
    let norm = 2.0 * PI * sigma * sigma / slant;
    let mut out = vec![Complex64::default(); h * w];
    for ey in -2i64..=2 {
        for ex in -2i64..=2 {
            for y in 0..h {
                let yy = y as f64 + (ey * h as i64) as f64;
                for x in 0..w {
                    let xx = x as f64 + (ex * w as i64) as f64;
                    let env = -(a * yy * yy + b * yy * xx + d * xx * xx);
                    let phase = xi * (yy * c + xx * s);
                    out[y * w + x] += Complex64::from_polar(env.exp(), phase);
                }
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= norm);
    out
}

/// Zero-mean Morlet wavelet: Gabor minus its matching Gaussian envelope.
fn morlet(h: usize, w: usize, sigma: f64, theta: f64, xi: f64, slant: f64) -> Vec<Complex64> {
    let wave = gabor(h, w, sigma, theta, xi, slant);
    let env = gabor(h, w, sigma, theta, 0.0, slant);
    let k = wave.iter().sum::<Complex64>() / env.iter().sum::<Complex64>();
    wave.iter().zip(&env).map(|(g, e)| g - k * e).collect()
}

/// Precomputed filters for one image size.
pub struct ScatteringBank {
    h: usize,
    w: usize,
    j: usize,
    l: usize,
    fft: Fft2,
    /// Fourier-domain band-pass filters indexed `j·L + θ`.
    psi: Vec<Vec<Complex64>>,
    phi: Vec<Complex64>,
}

impl ScatteringBank {
    pub fn new(h: usize, w: usize, j: usize, l: usize) -> Result<Self> {
        if j < 1 || l < 1 {
            return Err(Error::Config(format!("scattering needs J >= 1 and L >= 1, got J={j}, L={l}")));
        }
        let step = 1usize << j;
        if h % step != 0 || w % step != 0 {
            return Err(Error::Config(format!(
                "scattering with J={j} needs extents divisible by {step}, got {h}x{w}"
            )));
        }
        let fft = Fft2::new(h, w);
        let mut psi = Vec::with_capacity(j * l);
        for scale in 0..j {
            let sigma = 0.8 * (1u64 << scale) as f64;
            let xi = 3.0 * PI / 4.0 / (1u64 << scale) as f64;
            for t in 0..l {
                let theta = t as f64 * PI / l as f64;
                let mut f = morlet(h, w, sigma, theta, xi, 4.0 / l as f64);
                fft.forward(&mut f);
                f[0] = Complex64::default();
                psi.push(f);
            }
        }
        let mut phi = gabor(h, w, 0.8 * step as f64, 0.0, 0.0, 1.0);
        fft.forward(&mut phi);
        let dc = phi[0];
        phi.iter_mut().for_each(|v| *v /= dc);
        Ok(ScatteringBank { h, w, j, l, fft, psi, phi })
    }

    pub fn channels(&self) -> usize {
        channel_count(self.j, self.l)
    }

    /// `(H / 2^J, W / 2^J)`.
    pub fn output_extent(&self) -> (usize, usize) {
        (self.h >> self.j, self.w >> self.j)
    }

    pub fn output_len(&self) -> usize {
        let (oh, ow) = self.output_extent();
        self.channels() * oh * ow
    }

    fn lowpass_subsample(&self, hat: &[Complex64], out: &mut Vec<f64>) {
        let mut y: Vec<Complex64> = hat.iter().zip(&self.phi).map(|(a, b)| a * b).collect();
        self.fft.inverse(&mut y);
        let step = 1usize << self.j;
        for r in (0..self.h).step_by(step) {
            for c in (0..self.w).step_by(step) {
                out.push(y[r * self.w + c].re);
            }
        }
    }

    /// `|x ⋆ ψ|` returned in the Fourier domain.
    fn modulus_hat(&self, hat: &[Complex64], psi: &[Complex64]) -> Vec<Complex64> {
        let mut u: Vec<Complex64> = hat.iter().zip(psi).map(|(a, b)| a * b).collect();
        self.fft.inverse(&mut u);
        u.iter_mut().for_each(|v| *v = Complex64::new(v.norm(), 0.0));
        self.fft.forward(&mut u);
        u
    }

    /// Channels ordered: order 0, order 1 by `(j1, θ1)`, order 2 by
    /// `(j1, θ1, j2 > j1, θ2)`; each channel row-major.
    pub fn transform(&self, plane: ArrayView2<'_, f64>) -> Vec<f64> {
        let mut x: Vec<Complex64> = plane.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.fft.forward(&mut x);
        let mut out = Vec::with_capacity(self.output_len());
        self.lowpass_subsample(&x, &mut out);
        let first: Vec<Vec<Complex64>> = self.psi.iter().map(|p| self.modulus_hat(&x, p)).collect();
        for u in &first {
            self.lowpass_subsample(u, &mut out);
        }
        for j1 in 0..self.j {
            for t1 in 0..self.l {
                let u1 = &first[j1 * self.l + t1];
                for j2 in j1 + 1..self.j {
                    for t2 in 0..self.l {
                        let u2 = self.modulus_hat(u1, &self.psi[j2 * self.l + t2]);
                        self.lowpass_subsample(&u2, &mut out);
                    }
                }
            }
        }
        out
    }
}

//! Procedural oriented-grating textures: one orientation per class, with
//! random frequency, phase, brightness, contrast, tint and pixel noise.

use std::f64::consts::PI;

use ndarray::{Array3, Array4, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::stream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub size: usize,
    pub channels: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Cycles per pixel.
    pub frequency: f64,
    /// Relative spread of the frequency, `f·(1 ± jitter)`.
    pub frequency_jitter: f64,
    /// Orientation spread in radians around the class angle.
    pub orientation_jitter: f64,
    /// Phase range as a fraction of a full turn.
    pub phase_jitter: f64,
    pub contrast: [f64; 2],
    pub brightness: [f64; 2],
    /// Per-channel amplitude spread, `1 ± tint`.
    pub tint: f64,
    pub noise: f64,
    /// Falls back to the run seed when absent.
    pub seed: Option<u64>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 4,
            size: 32,
            channels: 3,
            train_per_class: 500,
            test_per_class: 125,
            frequency: 0.125,
            frequency_jitter: 0.4,
            orientation_jitter: 0.1,
            phase_jitter: 0.5,
            contrast: [0.1, 0.5],
            brightness: [0.2, 0.8],
            tint: 0.6,
            noise: 0.1,
            seed: None,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("data.synthetic: {m}")));
        if self.classes < 2 {
            return bad(format!("classes = {} must be >= 2", self.classes));
        }
        if self.size < 4 || self.channels == 0 {
            return bad(format!("image {}x{}x{} is too small", self.channels, self.size, self.size));
        }
        let limit = PI / (4.0 * self.classes as f64);
        if !(0.0..=limit).contains(&self.orientation_jitter) {
            return bad(format!(
                "orientation_jitter = {} would let classes overlap (max {limit:.4})",
                self.orientation_jitter
            ));
        }
        if !(self.frequency > 0.0 && self.frequency <= 0.5) {
            return bad(format!("frequency = {} is not in (0, 0.5]", self.frequency));
        }
        for (name, [lo, hi]) in [("contrast", self.contrast), ("brightness", self.brightness)] {
            if !(lo <= hi && lo >= 0.0) {
                return bad(format!("{name} range [{lo}, {hi}] is invalid"));
            }
        }
        if !(0.0..=1.0).contains(&self.phase_jitter) || !(0.0..1.0).contains(&self.frequency_jitter) {
            return bad("phase_jitter must be in [0, 1] and frequency_jitter in [0, 1)".into());
        }
        if !(self.noise >= 0.0 && self.tint >= 0.0) {
            return bad("noise and tint must be >= 0".into());
        }
        Ok(())
    }

    /// Class angles are spaced `π/(2K)` apart inside `[0, π/2)`, so a
    /// horizontal flip (θ → π − θ) never turns one class into another.
    pub fn class_angle(&self, class: usize) -> f64 {
        class as f64 * PI / (2.0 * self.classes as f64)
    }

    fn range<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
        if hi > lo {
            rng.random_range(lo..hi)
        } else {
            lo
        }
    }

    /// One image; its randomness is keyed by `(seed, split, index)`.
    pub fn render(&self, seed: u64, split: u64, index: usize, class: usize) -> Array3<f32> {
        let mut rng = stream(seed, "synthetic", &[split, index as u64]);
        let theta = self.class_angle(class) + Self::range(&mut rng, -self.orientation_jitter, self.orientation_jitter);
        let f = self.frequency * (1.0 + Self::range(&mut rng, -self.frequency_jitter, self.frequency_jitter));
        let phase = Self::range(&mut rng, 0.0, 2.0 * PI * self.phase_jitter);
        let contrast = Self::range(&mut rng, self.contrast[0], self.contrast[1]);
        let bright = Self::range(&mut rng, self.brightness[0], self.brightness[1]);
        let tints: Vec<f64> = (0..self.channels)
            .map(|_| 1.0 + Self::range(&mut rng, -self.tint, self.tint))
            .collect();
        let (c, s) = (theta.cos(), theta.sin());
        let n = self.size;
        let mut img = Array3::zeros((self.channels, n, n));
        for y in 0..n {
            for x in 0..n {
                let u = x as f64 * c + y as f64 * s;
                let g = (2.0 * PI * f * u + phase).cos();
                for (ch, t) in tints.iter().enumerate() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let v = bright + contrast * t * g + self.noise * z;
                    img[[ch, y, x]] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
        img
    }

    fn split(&self, seed: u64, split: u64, per_class: usize) -> Dataset {
        let n = per_class * self.classes;
        let labels: Vec<usize> = (0..n).map(|i| i % self.classes).collect();
        let images: Vec<Array3<f32>> = (0..n)
            .into_par_iter()
            .map(|i| self.render(seed, split, i, labels[i]))
            .collect();
        let mut px = Array4::zeros((n, self.channels, self.size, self.size));
        for (i, img) in images.iter().enumerate() {
            px.index_axis_mut(Axis(0), i).assign(img);
        }
        Dataset::new(px, Some(labels), self.classes).expect("consistent by construction")
    }
}

/// `(train, test)`, class-balanced with labels cycling `0, 1, …, K−1`.
pub fn make_synthetic(spec: &SyntheticSpec, run_seed: u64) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let seed = spec.seed.unwrap_or(run_seed);
    Ok((
        spec.split(seed, 0, spec.train_per_class),
        spec.split(seed, 1, spec.test_per_class),
    ))
}

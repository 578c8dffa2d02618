//! Stochastic view generation: random resized crop, horizontal flip, color
//! jitter, grayscale and Gaussian blur, applied in that order.

use ndarray::{s, Array1, Array3, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{resize_bilinear, LUMA};

const CROP_ATTEMPTS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentParams {
    /// Square output extent; 0 keeps the input size.
    pub out_size: usize,
    pub crop_scale: [f64; 2],
    pub crop_ratio: [f64; 2],
    pub flip_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub jitter_p: f64,
    pub grayscale_p: f64,
    pub blur_p: f64,
    pub blur_kernel_frac: f64,
    pub blur_sigma: [f64; 2],
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            out_size: 0,
            crop_scale: [0.2, 1.0],
            crop_ratio: [3.0 / 4.0, 4.0 / 3.0],
            flip_p: 0.5,
            brightness: 0.8,
            contrast: 0.8,
            saturation: 0.8,
            hue: 0.2,
            jitter_p: 0.8,
            grayscale_p: 0.2,
            blur_p: 0.5,
            blur_kernel_frac: 0.1,
            blur_sigma: [0.1, 2.0],
        }
    }
}

impl AugmentParams {
    /// Every stochastic stage off and the crop pinned to the full frame.
    pub fn disabled() -> Self {
        AugmentParams {
            crop_scale: [1.0, 1.0],
            crop_ratio: [1.0, 1.0],
            flip_p: 0.0,
            jitter_p: 0.0,
            grayscale_p: 0.0,
            blur_p: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("flip_p", self.flip_p),
            ("jitter_p", self.jitter_p),
            ("grayscale_p", self.grayscale_p),
            ("blur_p", self.blur_p),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("augment.{name} = {p} is not in [0, 1]")));
            }
        }
        let ranges = [
            ("crop_scale", self.crop_scale),
            ("crop_ratio", self.crop_ratio),
            ("blur_sigma", self.blur_sigma),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::Config(format!(
                    "augment.{name} = [{lo}, {hi}] is not a positive non-empty range"
                )));
            }
        }
        if self.crop_scale[1] > 1.0 {
            return Err(Error::Config("augment.crop_scale upper bound exceeds 1".into()));
        }
        for (name, v) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("augment.{name} = {v} must be >= 0")));
            }
        }
        if !(0.0..=0.5).contains(&self.hue) {
            return Err(Error::Config(format!("augment.hue = {} is not in [0, 0.5]", self.hue)));
        }
        if !(self.blur_kernel_frac >= 0.0 && self.blur_kernel_frac <= 1.0) {
            return Err(Error::Config("augment.blur_kernel_frac is not in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        if self.out_size == 0 {
            (h, w)
        } else {
            (self.out_size, self.out_size)
        }
    }
}

/// Crop window `(top, left, height, width)`.
pub type CropWindow = (usize, usize, usize, usize);

pub fn sample_crop<R: Rng + ?Sized>(
    h: usize,
    w: usize,
    scale: [f64; 2],
    ratio: [f64; 2],
    rng: &mut R,
) -> CropWindow {
    let area = (h * w) as f64;
    let (log_lo, log_hi) = (ratio[0].ln(), ratio[1].ln());
    for _ in 0..CROP_ATTEMPTS {
        let target = area * uniform(rng, scale[0], scale[1]);
        let aspect = uniform(rng, log_lo, log_hi).exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            return (top, left, ch, cw);
        }
    }
    log::debug!("crop sampling failed {CROP_ATTEMPTS} times on {h}x{w}; using center crop");
    center_crop(h, w, ratio)
}

fn center_crop(h: usize, w: usize, ratio: [f64; 2]) -> CropWindow {
    let in_ratio = w as f64 / h as f64;
    let (ch, cw) = if in_ratio < ratio[0] {
        (((w as f64 / ratio[0]).round() as usize).clamp(1, h), w)
    } else if in_ratio > ratio[1] {
        (h, ((h as f64 * ratio[1]).round() as usize).clamp(1, w))
    } else {
        (h, w)
    };
    ((h - ch) / 2, (w - cw) / 2, ch, cw)
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn coin<R: Rng + ?Sized>(rng: &mut R, p: f64) -> bool {
    rng.random::<f64>() < p
}

pub fn augment<R: Rng + ?Sized>(
    image: ArrayView3<'_, f32>,
    params: &AugmentParams,
    rng: &mut R,
) -> Array3<f32> {
    let (_, h, w) = image.dim();
    let (oh, ow) = params.output_dims(h, w);
    let (top, left, ch, cw) = sample_crop(h, w, params.crop_scale, params.crop_ratio, rng);
    let crop = image.slice(s![.., top..top + ch, left..left + cw]);
    let mut img = resize_bilinear(crop, oh, ow);

    if coin(rng, params.flip_p) {
        hflip(&mut img);
    }
    if coin(rng, params.jitter_p) {
        let factors = JitterFactors::sample(params, rng);
        img = color_jitter(img.view(), &factors);
    }
    if coin(rng, params.grayscale_p) {
        img = grayscale(img.view());
    }
    if coin(rng, params.blur_p) {
        let sigma = uniform(rng, params.blur_sigma[0], params.blur_sigma[1]);
        let kernel = blur_kernel_size(params.blur_kernel_frac, oh.min(ow));
        img = gaussian_blur(img.view(), sigma, kernel);
    }
    img.mapv_inplace(|v| v.clamp(0.0, 1.0));
    img
}

pub fn hflip(img: &mut Array3<f32>) {
    img.invert_axis(Axis(2));
    *img = img.as_standard_layout().into_owned();
}

/// Multipliers, hue offset and application order for one jitter call.
#[derive(Clone, Debug, PartialEq)]
pub struct JitterFactors {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Offset on the unit hue circle.
    pub hue: f64,
    /// Permutation of `[0: brightness, 1: contrast, 2: saturation, 3: hue]`.
    pub order: [usize; 4],
}

impl JitterFactors {
    pub fn identity() -> Self {
        JitterFactors {
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            hue: 0.0,
            order: [0, 1, 2, 3],
        }
    }

    pub fn sample<R: Rng + ?Sized>(params: &AugmentParams, rng: &mut R) -> Self {
        let mult = |rng: &mut R, v: f64| uniform(rng, (1.0 - v).max(0.0), 1.0 + v);
        let brightness = mult(rng, params.brightness);
        let contrast = mult(rng, params.contrast);
        let saturation = mult(rng, params.saturation);
        let hue = uniform(rng, -params.hue, params.hue);
        let mut order = [0, 1, 2, 3];
        order.shuffle(rng);
        JitterFactors {
            brightness,
            contrast,
            saturation,
            hue,
            order,
        }
    }
}

pub fn color_jitter(image: ArrayView3<'_, f32>, f: &JitterFactors) -> Array3<f32> {
    let mut img = image.to_owned();
    for &stage in &f.order {
        match stage {
            0 if f.brightness != 1.0 => {
                let b = f.brightness as f32;
                img.mapv_inplace(|v| (v * b).clamp(0.0, 1.0));
            }
            1 if f.contrast != 1.0 => {
                let mean = gray_plane(img.view()).mean().unwrap_or(0.0);
                blend_with(&mut img, f.contrast, |_, _| mean);
            }
            2 if f.saturation != 1.0 && img.dim().0 == 3 => {
                let gray = gray_plane(img.view());
                blend_with(&mut img, f.saturation, |y, x| gray[[y, x]]);
            }
            3 if f.hue != 0.0 && img.dim().0 == 3 => shift_hue(&mut img, f.hue),
            _ => {}
        }
    }
    img
}

/// `factor·img + (1 − factor)·other`, clamped.
fn blend_with(img: &mut Array3<f32>, factor: f64, other: impl Fn(usize, usize) -> f32) {
    let f = factor as f32;
    let (c, h, w) = img.dim();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = &mut img[[ch, y, x]];
                *v = (f * *v + (1.0 - f) * other(y, x)).clamp(0.0, 1.0);
            }
        }
    }
}

fn gray_plane(img: ArrayView3<'_, f32>) -> ndarray::Array2<f32> {
    if img.dim().0 != 3 {
        return img.index_axis(Axis(0), 0).to_owned();
    }
    let l = LUMA.map(|v| v as f32);
    &img.index_axis(Axis(0), 0) * l[0]
        + &img.index_axis(Axis(0), 1) * l[1]
        + &img.index_axis(Axis(0), 2) * l[2]
}

pub fn grayscale(image: ArrayView3<'_, f32>) -> Array3<f32> {
    let (c, h, w) = image.dim();
    let g = gray_plane(image);
    let mut out = Array3::zeros((c, h, w));
    for mut plane in out.axis_iter_mut(Axis(0)) {
        plane.assign(&g);
    }
    out
}

pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let s = if max > 0.0 { d / max } else { 0.0 };
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    (h, s, max)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn shift_hue(img: &mut Array3<f32>, offset: f64) {
    let (_, h, w) = img.dim();
    for y in 0..h {
        for x in 0..w {
            let (hh, s, v) = rgb_to_hsv(
                img[[0, y, x]] as f64,
                img[[1, y, x]] as f64,
                img[[2, y, x]] as f64,
            );
            let (r, g, b) = hsv_to_rgb(hh + offset, s, v);
            img[[0, y, x]] = r as f32;
            img[[1, y, x]] = g as f32;
            img[[2, y, x]] = b as f32;
        }
    }
}

/// `round(frac·extent)`, bumped to the next odd number, at least 1.
pub fn blur_kernel_size(frac: f64, extent: usize) -> usize {
    let k = (frac * extent as f64).round() as usize;
    (if k % 2 == 0 { k + 1 } else { k }).max(1)
}

pub fn gaussian_kernel(sigma: f64, size: usize) -> Array1<f64> {
    let r = (size / 2) as f64;
    let k = Array1::from_shape_fn(size, |i| {
        let x = i as f64 - r;
        (-x * x / (2.0 * sigma * sigma)).exp()
    });
    let total = k.sum();
    k / total
}

/// Separable Gaussian blur with replicate padding.
pub fn gaussian_blur(image: ArrayView3<'_, f32>, sigma: f64, kernel: usize) -> Array3<f32> {
    if kernel <= 1 {
        return image.to_owned();
    }
    let k = gaussian_kernel(sigma, kernel);
    let r = (kernel / 2) as isize;
    let (c, h, w) = image.dim();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = ndarray::Array3::<f64>::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    let xx = clamp(x as isize + t as isize - r, w);
                    acc += kv * image[[ch, y, xx]] as f64;
                }
                tmp[[ch, y, x]] = acc;
            }
        }
    }
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    let yy = clamp(y as isize + t as isize - r, h);
                    acc += kv * tmp[[ch, yy, x]];
                }
                out[[ch, y, x]] = acc as f32;
            }
        }
    }
    out
}

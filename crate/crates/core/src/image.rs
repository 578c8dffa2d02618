//! Image batches and the small amount of pixel plumbing shared by the
//! augmentation and descriptor code.

use ndarray::{s, Array3, Array4, ArrayView2, ArrayView3, Axis};

use crate::error::{Error, Result};

pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Where a sample came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub index: usize,
    /// Seed of the augmentation that produced the view, if any.
    pub aug_seed: Option<u64>,
}

/// `B×C×H×W` pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    pub pixels: Array4<f32>,
    pub provenance: Vec<Provenance>,
}

impl ImageBatch {
    pub fn new(pixels: Array4<f32>, provenance: Vec<Provenance>) -> Result<Self> {
        if pixels.len_of(Axis(0)) != provenance.len() {
            return Err(Error::shape(
                "image batch",
                pixels.shape(),
                &[provenance.len()],
            ));
        }
        Ok(ImageBatch { pixels, provenance })
    }

    /// Batch whose provenance is simply `0..B`.
    pub fn from_pixels(pixels: Array4<f32>) -> Self {
        let provenance = (0..pixels.len_of(Axis(0)))
            .map(|index| Provenance { index, aug_seed: None })
            .collect();
        ImageBatch { pixels, provenance }
    }

    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    /// `(C, H, W)`.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.pixels.shape();
        (s[1], s[2], s[3])
    }

    pub fn image(&self, i: usize) -> ArrayView3<'_, f32> {
        self.pixels.index_axis(Axis(0), i)
    }

    pub fn stack(images: &[Array3<f32>], provenance: Vec<Provenance>) -> Result<Self> {
        let views: Vec<_> = images.iter().map(|a| a.view()).collect();
        let pixels = ndarray::stack(Axis(0), &views)
            .map_err(|e| Error::Data(format!("cannot stack images: {e}")))?;
        Self::new(pixels, provenance)
    }
}

/// Bilinear resize with half-pixel centers; exact copy when sizes match.
pub fn resize_bilinear(img: ArrayView3<'_, f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (c, h, w) = img.dim();
    if (h, w) == (out_h, out_w) {
        return img.to_owned();
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, (src - i0 as f64) as f32)
            })
            .collect()
    };
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let mut out = Array3::zeros((c, out_h, out_w));
    for ch in 0..c {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = img[[ch, y0, x0]] * (1.0 - fx) + img[[ch, y0, x1]] * fx;
                let bot = img[[ch, y1, x0]] * (1.0 - fx) + img[[ch, y1, x1]] * fx;
                out[[ch, oy, ox]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn resize_batch(pixels: &Array4<f32>, out_h: usize, out_w: usize) -> Array4<f32> {
    let (b, c, h, w) = pixels.dim();
    if (h, w) == (out_h, out_w) {
        return pixels.clone();
    }
    let mut out = Array4::zeros((b, c, out_h, out_w));
    for i in 0..b {
        out.slice_mut(s![i, .., .., ..])
            .assign(&resize_bilinear(pixels.index_axis(Axis(0), i), out_h, out_w));
    }
    out
}

/// Luminance plane (`0.299 R + 0.587 G + 0.114 B`); single-channel images are
/// returned unchanged.
pub fn luminance(img: ArrayView3<'_, f32>) -> ndarray::Array2<f64> {
    let (c, h, w) = img.dim();
    if c != 3 {
        return img.index_axis(Axis(0), 0).mapv(|v| v as f64);
    }
    let mut out = ndarray::Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            out[[y, x]] = LUMA
                .iter()
                .enumerate()
                .map(|(k, wt)| wt * img[[k, y, x]] as f64)
                .sum();
        }
    }
    out
}

/// Planes a descriptor works on: either the luminance plane or every channel.
pub fn planes(img: ArrayView3<'_, f32>, use_luminance: bool) -> Vec<ndarray::Array2<f64>> {
    if use_luminance {
        vec![luminance(img)]
    } else {
        img.axis_iter(Axis(0))
            .map(|p: ArrayView2<'_, f32>| p.mapv(|v| v as f64))
            .collect()
    }
}

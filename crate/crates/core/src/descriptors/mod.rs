//! Fixed, non-learnable image representations used as dependence targets.

pub mod hog;
pub mod lsd;
pub mod scattering;

use ndarray::{Array2, ArrayView3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentParams};
use crate::error::{Error, Result};
use crate::image::{planes, ImageBatch};
use crate::rng::stream;

pub use scattering::ScatteringBank;

/// Purpose tag of the augmentation stream owned by `flatten_augmented`.
pub const DESCRIPTOR_AUGMENT_STREAM: &str = "descriptor-augment";

fn one() -> f64 {
    1.0
}
fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DescriptorSpec {
    FlattenOriginal {
        #[serde(default = "one")]
        weight: f64,
    },
    FlattenAugmented {
        #[serde(default = "one")]
        weight: f64,
        /// Extra key mixed into the augmentation stream.
        #[serde(default)]
        stream: u64,
    },
    Scattering {
        #[serde(default = "scat_j")]
        j: usize,
        #[serde(default = "scat_l")]
        l: usize,
        #[serde(default = "one")]
        weight: f64,
        #[serde(default)]
        luminance: bool,
    },
    Hog {
        #[serde(default = "hog_bins")]
        bins: usize,
        #[serde(default = "hog_pool")]
        pool: usize,
        #[serde(default = "one")]
        weight: f64,
        #[serde(default = "yes")]
        luminance: bool,
    },
    Lsd {
        #[serde(default = "lsd_kernel")]
        kernel: usize,
        #[serde(default = "one")]
        weight: f64,
        #[serde(default)]
        luminance: bool,
    },
}

fn scat_j() -> usize {
    2
}
fn scat_l() -> usize {
    8
}
fn hog_bins() -> usize {
    24
}
fn hog_pool() -> usize {
    8
}
fn lsd_kernel() -> usize {
    3
}

impl DescriptorSpec {
    pub fn flatten_original() -> Self {
        DescriptorSpec::FlattenOriginal { weight: 1.0 }
    }

    pub fn flatten_augmented() -> Self {
        DescriptorSpec::FlattenAugmented { weight: 1.0, stream: 0 }
    }

    pub fn scattering(j: usize, l: usize) -> Self {
        DescriptorSpec::Scattering { j, l, weight: 1.0, luminance: false }
    }

    pub fn hog(bins: usize, pool: usize) -> Self {
        DescriptorSpec::Hog { bins, pool, weight: 1.0, luminance: true }
    }

    pub fn lsd(kernel: usize) -> Self {
        DescriptorSpec::Lsd { kernel, weight: 1.0, luminance: false }
    }

    /// The full five-representation bank with the default parameters.
    pub fn default_bank() -> Vec<Self> {
        vec![
            Self::flatten_original(),
            Self::scattering(2, 8),
            Self::flatten_augmented(),
            Self::hog(24, 8),
            Self::lsd(3),
        ]
    }

    pub fn kind(&self) -> &'static str {
        match self {
            DescriptorSpec::FlattenOriginal { .. } => "flatten_original",
            DescriptorSpec::FlattenAugmented { .. } => "flatten_augmented",
            DescriptorSpec::Scattering { .. } => "scattering",
            DescriptorSpec::Hog { .. } => "hog",
            DescriptorSpec::Lsd { .. } => "lsd",
        }
    }

    pub fn weight(&self) -> f64 {
        match *self {
            DescriptorSpec::FlattenOriginal { weight }
            | DescriptorSpec::FlattenAugmented { weight, .. }
            | DescriptorSpec::Scattering { weight, .. }
            | DescriptorSpec::Hog { weight, .. }
            | DescriptorSpec::Lsd { weight, .. } => weight,
        }
    }

    pub fn with_weight(mut self, w: f64) -> Self {
        match &mut self {
            DescriptorSpec::FlattenOriginal { weight }
            | DescriptorSpec::FlattenAugmented { weight, .. }
            | DescriptorSpec::Scattering { weight, .. }
            | DescriptorSpec::Hog { weight, .. }
            | DescriptorSpec::Lsd { weight, .. } => *weight = w,
        }
        self
    }

    /// Whether the output depends on a random draw.
    pub fn is_stochastic(&self) -> bool {
        matches!(self, DescriptorSpec::FlattenAugmented { .. })
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.weight();
        if !(w >= 0.0 && w.is_finite()) {
            return Err(Error::Config(format!("{} weight {w} must be >= 0", self.kind())));
        }
        match *self {
            DescriptorSpec::Scattering { j, l, .. } if j < 1 || l < 1 => Err(Error::Config(
                format!("scattering needs J >= 1 and L >= 1, got J={j}, L={l}"),
            )),
            DescriptorSpec::Hog { bins, pool, .. } if bins < 2 || pool < 1 => Err(Error::Config(
                format!("hog needs bins >= 2 and pool >= 1, got bins={bins}, pool={pool}"),
            )),
            DescriptorSpec::Lsd { kernel, .. } if kernel < 3 || kernel % 2 == 0 => Err(
                Error::Config(format!("lsd kernel must be odd and >= 3, got {kernel}")),
            ),
            _ => Ok(()),
        }
    }
}

/// One descriptor evaluated on a batch: `B×D_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorOutput {
    pub kind: &'static str,
    pub values: Array2<f32>,
}

impl DescriptorOutput {
    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

enum Extractor {
    Flatten,
    Augmented { stream: u64 },
    Scattering { bank: ScatteringBank, luminance: bool },
    Hog { bins: usize, pool: usize, luminance: bool },
    Lsd { kernel: usize, luminance: bool },
}

/// A validated descriptor list bound to one image size, with any filter banks
/// precomputed.
pub struct DescriptorBank {
    specs: Vec<DescriptorSpec>,
    extractors: Vec<Extractor>,
    dims: (usize, usize, usize),
    augment: AugmentParams,
}

impl DescriptorBank {
    /// `dims` is `(C, H, W)`; `augment` drives `flatten_augmented`.
    pub fn new(specs: &[DescriptorSpec], dims: (usize, usize, usize), augment: &AugmentParams) -> Result<Self> {
        let (_, h, w) = dims;
        let mut extractors = Vec::with_capacity(specs.len());
        for spec in specs {
            spec.validate()?;
            extractors.push(match *spec {
                DescriptorSpec::FlattenOriginal { .. } => Extractor::Flatten,
                DescriptorSpec::FlattenAugmented { stream, .. } => Extractor::Augmented { stream },
                DescriptorSpec::Scattering { j, l, luminance, .. } => Extractor::Scattering {
                    bank: ScatteringBank::new(h, w, j, l)?,
                    luminance,
                },
                DescriptorSpec::Hog { bins, pool, luminance, .. } => {
                    if h < pool || w < pool {
                        return Err(Error::Config(format!(
                            "hog pool {pool} is larger than the {h}x{w} image"
                        )));
                    }
                    Extractor::Hog { bins, pool, luminance }
                }
                DescriptorSpec::Lsd { kernel, luminance, .. } => {
                    if kernel > h || kernel > w {
                        return Err(Error::Config(format!(
                            "lsd kernel {kernel} is larger than the {h}x{w} image"
                        )));
                    }
                    Extractor::Lsd { kernel, luminance }
                }
            });
        }
        Ok(DescriptorBank {
            specs: specs.to_vec(),
            extractors,
            dims,
            augment: augment.clone(),
        })
    }

    pub fn specs(&self) -> &[DescriptorSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// Flattened length `D_k` of every descriptor.
    pub fn output_dims(&self) -> Vec<usize> {
        let (c, h, w) = self.dims;
        let planes_of = |lum: bool| if lum { 1 } else { c };
        self.extractors
            .iter()
            .map(|e| match e {
                Extractor::Flatten => c * h * w,
                Extractor::Augmented { .. } => {
                    let (oh, ow) = self.augment.output_dims(h, w);
                    c * oh * ow
                }
                Extractor::Scattering { bank, luminance } => planes_of(*luminance) * bank.output_len(),
                Extractor::Hog { bins, pool, luminance } => {
                    planes_of(*luminance) * (h / pool) * (w / pool) * bins
                }
                Extractor::Lsd { luminance, .. } => planes_of(*luminance) * h * w,
            })
            .collect()
    }

    /// Descriptor `k` of one image. `draw` keys the augmentation stream of
    /// `flatten_augmented` together with `seed` and the dataset index.
    pub fn extract(&self, k: usize, image: ArrayView3<'_, f32>, seed: u64, draw: u64, index: usize) -> Vec<f32> {
        match &self.extractors[k] {
            Extractor::Flatten => image.iter().copied().collect(),
            Extractor::Augmented { stream: s } => {
                let mut rng = stream(seed, DESCRIPTOR_AUGMENT_STREAM, &[*s, draw, index as u64]);
                augment(image, &self.augment, &mut rng).iter().copied().collect()
            }
            Extractor::Scattering { bank, luminance } => planes(image, *luminance)
                .iter()
                .flat_map(|p| bank.transform(p.view()))
                .map(|v| v as f32)
                .collect(),
            Extractor::Hog { bins, pool, luminance } => planes(image, *luminance)
                .iter()
                .flat_map(|p| hog::hog(p.view(), *bins, *pool))
                .map(|v| v as f32)
                .collect(),
            Extractor::Lsd { kernel, luminance } => planes(image, *luminance)
                .iter()
                .flat_map(|p| lsd::local_std(p.view(), *kernel).into_iter())
                .map(|v| v as f32)
                .collect(),
        }
    }

    /// Descriptor `k` over a batch, samples in parallel.
    pub fn extract_batch(&self, k: usize, batch: &ImageBatch, seed: u64, draw: u64) -> Result<DescriptorOutput> {
        if batch.image_dims() != self.dims {
            return Err(Error::shape(
                "descriptor bank",
                &[self.dims.0, self.dims.1, self.dims.2],
                &[batch.image_dims().0, batch.image_dims().1, batch.image_dims().2],
            ));
        }
        let d = self.output_dims()[k];
        let rows: Vec<Vec<f32>> = (0..batch.len())
            .into_par_iter()
            .map(|i| self.extract(k, batch.image(i), seed, draw, batch.provenance[i].index))
            .collect();
        let mut values = Array2::zeros((batch.len(), d));
        for (i, row) in rows.into_iter().enumerate() {
            values.row_mut(i).assign(&ndarray::ArrayView1::from(&row[..]));
        }
        Ok(DescriptorOutput {
            kind: self.specs[k].kind(),
            values,
        })
    }

    pub fn apply(&self, batch: &ImageBatch, seed: u64, draw: u64) -> Result<Vec<DescriptorOutput>> {
        (0..self.len()).map(|k| self.extract_batch(k, batch, seed, draw)).collect()
    }
}

/// Every descriptor in `specs` on the (non-augmented) batch, in order.
pub fn apply_bank(
    batch: &ImageBatch,
    specs: &[DescriptorSpec],
    augment: &AugmentParams,
    seed: u64,
    draw: u64,
) -> Result<Vec<DescriptorOutput>> {
    if specs.is_empty() {
        return Err(Error::Config("descriptor list is empty".into()));
    }
    DescriptorBank::new(specs, batch.image_dims(), augment)?.apply(batch, seed, draw)
}

fn single(batch: &ImageBatch, spec: DescriptorSpec) -> Result<DescriptorOutput> {
    DescriptorBank::new(&[spec], batch.image_dims(), &AugmentParams::default())?.extract_batch(0, batch, 0, 0)
}

pub fn flatten_image(batch: &ImageBatch) -> DescriptorOutput {
    let (b, c, h, w) = batch.pixels.dim();
    let values = batch
        .pixels
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((b, c * h * w))
        .expect("contiguous batch");
    DescriptorOutput {
        kind: "flatten_original",
        values,
    }
}

pub fn lsd_filter(batch: &ImageBatch, kernel: usize) -> Result<DescriptorOutput> {
    single(batch, DescriptorSpec::lsd(kernel))
}

pub fn hog_descriptor(batch: &ImageBatch, bins: usize, pool: usize) -> Result<DescriptorOutput> {
    single(batch, DescriptorSpec::hog(bins, pool))
}

pub fn scattering(batch: &ImageBatch, j: usize, l: usize) -> Result<DescriptorOutput> {
    single(batch, DescriptorSpec::scattering(j, l))
}

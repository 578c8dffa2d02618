//! Datasets, file formats and batching.

pub mod matrix;
pub mod stl10;
pub mod synthetic;

use std::path::Path;

use ndarray::{Array4, Axis};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{DataConfig, DataSource};
use crate::error::{Error, Result};
use crate::image::{resize_batch, ImageBatch, Provenance};

pub use matrix::{decode_matrix, encode_matrix, read_matrix, write_matrix};
pub use stl10::{read_stl10, STL10_CLASSES};
pub use synthetic::{make_synthetic, SyntheticSpec};

/// Datasets a run needs: `pretrain` feeds the SSL loop, `train`/`test` the probe.
#[derive(Clone, Debug)]
pub struct Splits {
    pub pretrain: Dataset,
    pub train: Dataset,
    pub test: Dataset,
}

/// Loads the configured source at the configured resolution.
pub fn load_splits(cfg: &DataConfig, run_seed: u64) -> Result<Splits> {
    let size = cfg.image_size;
    match cfg.source {
        DataSource::Synthetic => {
            let (train, test) = make_synthetic(&cfg.synthetic, run_seed)?;
            let (train, test) = if train.image_dims().1 == size {
                (train, test)
            } else {
                (train.resized(size, size), test.resized(size, size))
            };
            Ok(Splits {
                pretrain: train.clone(),
                train,
                test,
            })
        }
        DataSource::Stl10 => {
            let p = &cfg.stl10;
            let limit = (p.limit > 0).then_some(p.limit);
            let labeled = |img: &str, lab: &str| -> Result<Dataset> {
                if img.is_empty() || lab.is_empty() {
                    return Err(Error::Config("data.stl10 needs image and label paths for train and test".into()));
                }
                let (px, labels) = read_stl10(img, Some(Path::new(lab)), limit)?;
                Ok(Dataset::new(px, labels, STL10_CLASSES)?.resized(size, size))
            };
            let train = labeled(&p.train_images, &p.train_labels)?;
            let test = labeled(&p.test_images, &p.test_labels)?;
            let pretrain = if p.unlabeled_images.is_empty() {
                train.clone()
            } else {
                let (px, _) = read_stl10(&p.unlabeled_images, None, limit)?;
                Dataset::new(px, None, STL10_CLASSES)?.resized(size, size)
            };
            Ok(Splits { pretrain, train, test })
        }
    }
}

/// Immutable image collection with optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Array4<f32>,
    pub labels: Option<Vec<usize>>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Array4<f32>, labels: Option<Vec<usize>>, classes: usize) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != images.dim().0 {
                return Err(Error::Data(format!("{} labels for {} images", l.len(), images.dim().0)));
            }
            if let Some((i, &bad)) = l.iter().enumerate().find(|(_, &v)| v >= classes) {
                return Err(Error::Data(format!("label {bad} of sample {i} exceeds {classes} classes")));
            }
        }
        Ok(Dataset { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.images.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(C, H, W)`.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let (_, c, h, w) = self.images.dim();
        (c, h, w)
    }

    pub fn resized(&self, h: usize, w: usize) -> Dataset {
        Dataset {
            images: resize_batch(&self.images, h, w),
            labels: self.labels.clone(),
            classes: self.classes,
        }
    }

    /// Batch of the given dataset indices; provenance records the indices.
    pub fn gather(&self, indices: &[usize]) -> ImageBatch {
        let pixels = self.images.select(Axis(0), indices);
        let provenance = indices
            .iter()
            .map(|&index| Provenance { index, aug_seed: None })
            .collect();
        ImageBatch { pixels, provenance }
    }

    pub fn labels_of(&self, indices: &[usize]) -> Result<Vec<usize>> {
        let l = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::Data("dataset has no labels".into()))?;
        Ok(indices.iter().map(|&i| l[i]).collect())
    }

    pub fn all(&self) -> ImageBatch {
        self.gather(&(0..self.len()).collect::<Vec<_>>())
    }
}

/// Sample order of one epoch: `0..n` under a Fisher–Yates shuffle driven by a
/// ChaCha8 generator seeded with `seed ^ epoch`. The swap partner for
/// position `i` is `⌊u·(i+1) / 2⁶⁴⌋` for the next 64-bit word `u`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = ((rng.next_u64() as u128 * (i as u128 + 1)) >> 64) as usize;
        order.swap(i, j);
    }
    order
}

pub fn batch_indices(n: usize, batch: usize, seed: u64, epoch: u64, drop_last: bool) -> Vec<Vec<usize>> {
    epoch_order(n, seed, epoch)
        .chunks(batch.max(1))
        .filter(|c| !drop_last || c.len() == batch)
        .map(<[usize]>::to_vec)
        .collect()
}

pub fn make_batches<'a>(
    data: &'a Dataset,
    batch: usize,
    seed: u64,
    epoch: u64,
    drop_last: bool,
) -> impl Iterator<Item = ImageBatch> + 'a {
    batch_indices(data.len(), batch, seed, epoch, drop_last)
        .into_iter()
        .map(move |idx| data.gather(&idx))
}

#[cfg(test)]
mod tests {
    use super::*;
    fn tiny(n: usize) -> Dataset {
        let px = Array4::from_shape_fn((n, 1, 2, 2), |(i, _, y, x)| (i * 4 + y * 2 + x) as f32);
        Dataset::new(px, Some((0..n).map(|i| i % 2).collect()), 2).unwrap()
    }

    #[test]
    fn drop_last_counts() {
        assert_eq!(batch_indices(10, 3, 0, 0, true).len(), 3);
        assert_eq!(batch_indices(10, 3, 0, 0, false).len(), 4);
        let d = tiny(10);
        let batches: Vec<_> = make_batches(&d, 3, 1, 0, true).collect();
        assert_eq!(batches.len(), 3);
        for b in &batches {
            for (k, p) in b.provenance.iter().enumerate() {
                assert_eq!(b.pixels[[k, 0, 0, 0]], (p.index * 4) as f32);
            }
        }
    }

    #[test]
    fn epoch_order_matches_fisher_yates() {
        let (n, seed, epoch) = (17, 42u64, 3u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch);
        let words: Vec<u64> = (0..n).map(|_| rng.next_u64()).collect();
        let mut want: Vec<usize> = (0..n).collect();
        let mut w = words.iter();
        let mut i = n - 1;
        while i > 0 {
            let j = (((*w.next().unwrap() as u128) * (i as u128 + 1)) >> 64) as usize;
            let t = want[i];
            want[i] = want[j];
            want[j] = t;
            i -= 1;
        }
        assert_eq!(epoch_order(n, seed, epoch), want);
        let mut sorted = want.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        assert_eq!(epoch_order(n, seed, epoch), epoch_order(n, seed, epoch));
        assert_ne!(epoch_order(n, seed, 0), epoch_order(n, seed, 1));
    }

    #[test]
    fn label_checks() {
        let px = Array4::zeros((2, 1, 2, 2));
        assert!(Dataset::new(px.clone(), Some(vec![0]), 2).is_err());
        assert!(Dataset::new(px, Some(vec![0, 2]), 2).is_err());
    }
}

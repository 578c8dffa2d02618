//! STL-10 binary files: 3×96×96 unsigned bytes per image, channel-major and
//! column-major inside each channel; labels are one byte per image in 1..=10.

use std::path::Path;

use ndarray::Array4;

use crate::error::{Error, Result};

pub const STL10_SIDE: usize = 96;
pub const STL10_CHANNELS: usize = 3;
pub const STL10_IMAGE_BYTES: usize = STL10_CHANNELS * STL10_SIDE * STL10_SIDE;
pub const STL10_CLASSES: usize = 10;

pub fn decode_stl10_images(bytes: &[u8], limit: Option<usize>) -> Result<Array4<f32>> {
    if bytes.len() % STL10_IMAGE_BYTES != 0 {
        let whole = bytes.len() / STL10_IMAGE_BYTES;
        return Err(Error::Format(format!(
            "image file length {} is not a multiple of {STL10_IMAGE_BYTES}; partial image starts at byte offset {}",
            bytes.len(),
            whole * STL10_IMAGE_BYTES
        )));
    }
    let mut n = bytes.len() / STL10_IMAGE_BYTES;
    if let Some(l) = limit {
        n = n.min(l);
    }
    let s = STL10_SIDE;
    let mut px = Array4::zeros((n, STL10_CHANNELS, s, s));
    for (i, img) in bytes.chunks_exact(STL10_IMAGE_BYTES).take(n).enumerate() {
        for ch in 0..STL10_CHANNELS {
            let plane = &img[ch * s * s..(ch + 1) * s * s];
            for c in 0..s {
                for r in 0..s {
                    px[[i, ch, r, c]] = plane[c * s + r] as f32 / 255.0;
                }
            }
        }
    }
    Ok(px)
}

pub fn decode_stl10_labels(bytes: &[u8], limit: Option<usize>) -> Result<Vec<usize>> {
    let n = limit.map_or(bytes.len(), |l| l.min(bytes.len()));
    bytes[..n]
        .iter()
        .enumerate()
        .map(|(off, &b)| {
            if (1..=STL10_CLASSES as u8).contains(&b) {
                Ok(b as usize - 1)
            } else {
                Err(Error::Data(format!("label {b} at byte offset {off} is outside 1..=10")))
            }
        })
        .collect()
}

/// Inverse of [`decode_stl10_images`]; pixels are rounded to the nearest byte.
pub fn encode_stl10_images(px: &Array4<f32>) -> Result<Vec<u8>> {
    let (n, c, h, w) = px.dim();
    if (c, h, w) != (STL10_CHANNELS, STL10_SIDE, STL10_SIDE) {
        return Err(Error::shape("encode_stl10", &[c, h, w], &[STL10_CHANNELS, STL10_SIDE, STL10_SIDE]));
    }
    let s = STL10_SIDE;
    let mut out = vec![0u8; n * STL10_IMAGE_BYTES];
    for i in 0..n {
        for ch in 0..c {
            for col in 0..s {
                for row in 0..s {
                    let v = (px[[i, ch, row, col]].clamp(0.0, 1.0) * 255.0).round() as u8;
                    out[i * STL10_IMAGE_BYTES + ch * s * s + col * s + row] = v;
                }
            }
        }
    }
    Ok(out)
}

pub fn read_stl10(
    images: impl AsRef<Path>,
    labels: Option<&Path>,
    limit: Option<usize>,
) -> Result<(Array4<f32>, Option<Vec<usize>>)> {
    let images = images.as_ref();
    let bytes = std::fs::read(images)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", images.display())))?;
    let px = decode_stl10_images(&bytes, limit)?;
    let labels = match labels {
        Some(p) => {
            let lb = std::fs::read(p).map_err(|e| Error::Data(format!("cannot read {}: {e}", p.display())))?;
            let labels = decode_stl10_labels(&lb, limit)?;
            if labels.len() != px.dim().0 {
                return Err(Error::Data(format!(
                    "{} labels for {} images",
                    labels.len(),
                    px.dim().0
                )));
            }
            Some(labels)
        }
        None => None,
    };
    Ok((px, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_and_scaling() {
        let mut bytes = vec![0u8; 2 * STL10_IMAGE_BYTES];
        bytes[0] = 255;
        let px = decode_stl10_images(&bytes, None).unwrap();
        assert_eq!(px.dim(), (2, 3, 96, 96));
        assert_eq!(px[[0, 0, 0, 0]], 1.0);
        assert_eq!(decode_stl10_images(&bytes, Some(1)).unwrap().dim().0, 1);
    }

    #[test]
    fn column_major_within_channel() {
        // bytes 0..96 of a plane are its first column
        let mut bytes = vec![0u8; STL10_IMAGE_BYTES];
        for r in 0..96 {
            bytes[r] = 200;
        }
        let px = decode_stl10_images(&bytes, None).unwrap();
        for r in 0..96 {
            assert!(px[[0, 0, r, 0]] > 0.7);
        }
        assert_eq!(px[[0, 0, 0, 1]], 0.0);
        assert_eq!(encode_stl10_images(&px).unwrap(), bytes);
    }

    #[test]
    fn malformed_inputs() {
        let err = decode_stl10_images(&vec![0u8; STL10_IMAGE_BYTES + 5], None).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        assert!(err.to_string().contains("byte offset 27648"));
        assert_eq!(decode_stl10_labels(&[1, 10, 3], None).unwrap(), vec![0, 9, 2]);
        let err = decode_stl10_labels(&[1, 11], None).unwrap_err();
        assert!(matches!(err, Error::Data(_)) && err.to_string().contains("offset 1"));
        assert!(decode_stl10_labels(&[0], None).is_err());
    }
}

//! `MVTE` matrix files: 16-byte header (`"MVTE"`, version, rows, cols as
//! little-endian u32) followed by row-major little-endian f32.

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const MATRIX_MAGIC: &[u8; 4] = b"MVTE";
pub const MATRIX_VERSION: u32 = 1;
pub const MATRIX_HEADER: usize = 16;

pub fn encode_matrix(m: &Array2<f32>) -> Vec<u8> {
    let (rows, cols) = m.dim();
    let mut out = Vec::with_capacity(MATRIX_HEADER + rows * cols * 4);
    out.extend_from_slice(MATRIX_MAGIC);
    for v in [MATRIX_VERSION, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn u32_at(bytes: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes"))
}

pub fn decode_matrix(bytes: &[u8]) -> Result<Array2<f32>> {
    if bytes.len() < MATRIX_HEADER {
        return Err(Error::Integrity(format!(
            "matrix header truncated: {} of {MATRIX_HEADER} bytes",
            bytes.len()
        )));
    }
    if &bytes[..4] != MATRIX_MAGIC {
        return Err(Error::Format(format!("bad matrix magic {:?} at byte offset 0", &bytes[..4])));
    }
    let version = u32_at(bytes, 4);
    if version != MATRIX_VERSION {
        return Err(Error::Format(format!("unsupported matrix version {version} at byte offset 4")));
    }
    let rows = u32_at(bytes, 8) as usize;
    let cols = u32_at(bytes, 12) as usize;
    let want = MATRIX_HEADER + rows * cols * 4;
    if bytes.len() != want {
        let err = format!(
            "matrix {rows}x{cols} needs {want} bytes, file has {} (mismatch at byte offset {})",
            bytes.len(),
            bytes.len().min(want)
        );
        return Err(if bytes.len() < want { Error::Integrity(err) } else { Error::Format(err) });
    }
    let data = bytes[MATRIX_HEADER..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), data).expect("length checked"))
}

pub fn write_matrix(path: impl AsRef<Path>, m: &Array2<f32>) -> Result<()> {
    std::fs::write(path, encode_matrix(m))?;
    Ok(())
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Array2<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    decode_matrix(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_size() {
        let m = Array2::from_shape_vec((3, 2), vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE, 0.0, 7.0]).unwrap();
        let bytes = encode_matrix(&m);
        assert_eq!(bytes.len(), 16 + 24);
        assert_eq!(decode_matrix(&bytes).unwrap(), m);
    }

    #[test]
    fn empty_matrix() {
        let m = Array2::<f32>::zeros((0, 5));
        let bytes = encode_matrix(&m);
        assert_eq!(bytes.len(), 16);
        assert_eq!(decode_matrix(&bytes).unwrap().dim(), (0, 5));
    }

    #[test]
    fn rejects_bad_input() {
        let mut bytes = encode_matrix(&Array2::ones((2, 2)));
        assert!(matches!(decode_matrix(&bytes[..20]), Err(Error::Integrity(_))));
        assert!(matches!(decode_matrix(&bytes[..10]), Err(Error::Integrity(_))));
        bytes[0] = b'X';
        assert!(matches!(decode_matrix(&bytes), Err(Error::Format(_))));
    }
}

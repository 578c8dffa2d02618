//! `MVCK` checkpoint files.
//!
//! ```text
//! "MVCK" | version u32
//! digest   : u32 length + utf-8
//! config   : u32 length + utf-8 (resolved run configuration, may be empty)
//! tensors  : u32 count + records
//! buffers  : u32 count + records
//! optimizer: u8 flag [+ step u64 + u32 count + records]
//! rng      : u8 flag [+ seed 32 bytes + stream u64 + word position u128]
//! record   : name (u32 length + utf-8) | dtype u8 | ndim u32 | dims u64… | payload
//! ```
//!
//! All integers and payloads are little-endian.

use std::path::Path;

use super::Model;
use crate::error::{Error, Result};
use crate::real::{DType, Real};
use crate::rng::RngState;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MVCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dtype: DType,
    pub dims: Vec<usize>,
    /// Little-endian payload.
    pub bytes: Vec<u8>,
}

impl NamedTensor {
    pub fn from_slice<T: Real>(name: impl Into<String>, dims: &[usize], data: &[T]) -> Self {
        let mut bytes = Vec::with_capacity(data.len() * T::DTYPE.size());
        data.iter().for_each(|v| v.write_le(&mut bytes));
        NamedTensor {
            name: name.into(),
            dtype: T::DTYPE,
            dims: dims.to_vec(),
            bytes,
        }
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    /// Values in `T`, converting through `f64` when the stored width differs.
    pub fn to_vec<T: Real>(&self) -> Vec<T> {
        let size = self.dtype.size();
        self.bytes
            .chunks_exact(size)
            .map(|c| match self.dtype {
                d if d == T::DTYPE => T::read_le(c),
                DType::F32 => T::of(f32::read_le(c) as f64),
                DType::F64 => T::of(f64::read_le(c)),
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub digest: String,
    pub config: String,
    pub tensors: Vec<NamedTensor>,
    pub buffers: Vec<NamedTensor>,
    pub optimizer: Option<OptimizerState>,
    pub rng: Option<RngState>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_table(out: &mut Vec<u8>, table: &[NamedTensor]) {
    put_u32(out, table.len() as u32);
    for t in table {
        put_str(out, &t.name);
        out.push(t.dtype.code());
        put_u32(out, t.dims.len() as u32);
        for &d in &t.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&t.bytes);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Integrity(format!(
                "checkpoint truncated reading {what} at byte offset {} ({} bytes left, {n} needed)",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let at = self.pos;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::Integrity(format!("invalid utf-8 in {what} at byte offset {at}")))
    }

    fn table(&mut self, what: &str) -> Result<Vec<NamedTensor>> {
        let count = self.u32(what)? as usize;
        let mut out = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = self.string("tensor name")?;
            let at = self.pos;
            let code = self.u8("dtype")?;
            let dtype = DType::from_code(code)
                .ok_or_else(|| Error::Format(format!("unknown dtype code {code} at byte offset {at}")))?;
            let ndim = self.u32("ndim")? as usize;
            let mut dims = Vec::with_capacity(ndim.min(16));
            for _ in 0..ndim {
                dims.push(self.u64("dims")? as usize);
            }
            let n = dims
                .iter()
                .try_fold(dtype.size(), |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Integrity(format!("tensor {name} has overflowing extents {dims:?}")))?;
            let bytes = self.take(n, &format!("payload of {name}"))?.to_vec();
            out.push(NamedTensor { name, dtype, dims, bytes });
        }
        Ok(out)
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_str(&mut out, &self.digest);
        put_str(&mut out, &self.config);
        put_table(&mut out, &self.tensors);
        put_table(&mut out, &self.buffers);
        match &self.optimizer {
            Some(o) => {
                out.push(1);
                out.extend_from_slice(&o.step.to_le_bytes());
                put_table(&mut out, &o.tensors);
            }
            None => out.push(0),
        }
        match &self.rng {
            Some(r) => {
                out.push(1);
                out.extend_from_slice(&r.seed);
                out.extend_from_slice(&r.stream.to_le_bytes());
                out.extend_from_slice(&r.word_pos.to_le_bytes());
            }
            None => out.push(0),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?} at byte offset 0")));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version} at byte offset 4")));
        }
        let digest = r.string("digest")?;
        let config = r.string("config")?;
        let tensors = r.table("tensor table")?;
        let buffers = r.table("buffer table")?;
        let optimizer = match r.u8("optimizer flag")? {
            0 => None,
            1 => {
                let step = r.u64("optimizer step")?;
                Some(OptimizerState {
                    step,
                    tensors: r.table("optimizer table")?,
                })
            }
            f => return Err(Error::Format(format!("bad optimizer flag {f} at byte offset {}", r.pos - 1))),
        };
        let rng = match r.u8("rng flag")? {
            0 => None,
            1 => {
                let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().expect("32 bytes");
                let stream = r.u64("rng stream")?;
                let word_pos = u128::from_le_bytes(r.take(16, "rng position")?.try_into().expect("16 bytes"));
                Some(RngState { seed, stream, word_pos })
            }
            f => return Err(Error::Format(format!("bad rng flag {f} at byte offset {}", r.pos - 1))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Integrity(format!(
                "{} trailing bytes after checkpoint end at byte offset {}",
                bytes.len() - r.pos,
                r.pos
            )));
        }
        Ok(Checkpoint {
            digest,
            config,
            tensors,
            buffers,
            optimizer,
            rng,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        // write-then-rename so an interrupted save never clobbers the last good file
        let tmp = path.with_extension("mvck.tmp");
        std::fs::write(&tmp, self.encode())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Data(format!("cannot read checkpoint {}: {e}", path.display())))?;
        Self::decode(&bytes)
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

impl<T: Real> Model<T> {
    /// Parameters and running statistics; digest, config, optimizer and RNG
    /// are left for the caller to fill in.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let tensors = self
            .params
            .iter()
            .map(|p| NamedTensor::from_slice(p.name.clone(), &p.shape, &p.data))
            .collect();
        let mut buffers = Vec::new();
        for (name, s) in self.buffer_names.iter().zip(&self.buffers) {
            let n = s.running_mean.len();
            buffers.push(NamedTensor::from_slice(format!("{name}.running_mean"), &[n], &s.running_mean));
            buffers.push(NamedTensor::from_slice(format!("{name}.running_var"), &[n], &s.running_var));
        }
        Checkpoint {
            tensors,
            buffers,
            ..Checkpoint::default()
        }
    }

    /// Overwrites parameters and running statistics from `ckpt`; every entry
    /// must be present with the expected shape.
    pub fn load_state(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let find = |table: &[NamedTensor], name: &str, dims: &[usize]| -> Result<Vec<T>> {
            let t = table
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::Format(format!("checkpoint has no tensor {name}")))?;
            if t.dims != dims {
                return Err(Error::shape("checkpoint tensor", &t.dims, dims));
            }
            Ok(t.to_vec())
        };
        for p in &mut self.params {
            p.data = find(&ckpt.tensors, &p.name, &p.shape)?;
        }
        let names = self.buffer_names.clone();
        for (name, s) in names.iter().zip(self.buffers_mut()) {
            let n = s.running_mean.len();
            s.running_mean = find(&ckpt.buffers, &format!("{name}.running_mean"), &[n])?;
            s.running_var = find(&ckpt.buffers, &format!("{name}.running_var"), &[n])?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EncoderConfig, ProjectorConfig};
    use ndarray::Array4;

    fn model(seed: u64) -> Model<f32> {
        Model::new(&EncoderConfig::default(), &ProjectorConfig::default(), (3, 16, 16), seed).unwrap()
    }

    fn sample() -> Checkpoint {
        let mut c = model(0).to_checkpoint();
        c.digest = "abc".into();
        c.config = "[train]\nepochs = 1\n".into();
        c.optimizer = Some(OptimizerState {
            step: 7,
            tensors: vec![NamedTensor::from_slice("m.x", &[2], &[1.0f64, -1.0])],
        });
        c.rng = Some(RngState {
            seed: [3; 32],
            stream: 5,
            word_pos: 1 << 70,
        });
        c
    }

    #[test]
    fn encode_decode_round_trip() {
        let c = sample();
        assert_eq!(Checkpoint::decode(&c.encode()).unwrap(), c);
    }

    #[test]
    fn forward_is_bitwise_after_reload() {
        let mut m = model(4);
        let px = Array4::from_shape_fn((6, 3, 16, 16), |(b, c, y, x)| ((b * 7 + c + y * 3 + x) % 11) as f32 / 11.0);
        // move the running stats away from their defaults
        let p = m.bind(false);
        let x = m.pixels_tensor(&px).unwrap();
        m.encode(&p, &x).unwrap();
        let bytes = m.to_checkpoint().encode();
        let mut back = model(99);
        back.load_state(&Checkpoint::decode(&bytes).unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.embed(&px, true).unwrap(), m.embed(&px, true).unwrap());
    }

    #[test]
    fn rejects_bad_files() {
        let bytes = sample().encode();
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Format(_))));
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::decode(&bytes[..cut]), Err(Error::Integrity(_))), "cut {cut}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(Checkpoint::decode(&long), Err(Error::Integrity(_))));
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mvck");
        let c = sample();
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
    }
}

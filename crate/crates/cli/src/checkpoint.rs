//! Binary checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "RNVP" | u32 version | u8 dtype | u64 step | u64 seed | u32 array count
//! per array: u16 name length | name | u8 ndim | u32 dims… | payload
//! u32 CRC32 of every preceding byte
//! ```

use std::io::Write;
use std::path::Path;

use flowcritic::{DType, Scalar, Tensor};

use crate::error::CheckpointError;

pub const MAGIC: &[u8; 4] = b"RNVP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    /// Values widened to `f64`; narrowing back to the checkpoint dtype is exact.
    pub data: Vec<f64>,
}

impl NamedArray {
    pub fn from_tensor<T: Scalar>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        NamedArray {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: t.to_f64_vec(),
        }
    }

    pub fn from_values(name: impl Into<String>, data: Vec<f64>) -> Self {
        NamedArray {
            name: name.into(),
            shape: vec![data.len()],
            data,
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>, CheckpointError> {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| T::from_f64(v)).collect())
            .map_err(|e| CheckpointError::Malformed(format!("array {}: {e}", self.name)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub dtype: DType,
    pub step: u64,
    pub seed: u64,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&NamedArray, CheckpointError> {
        self.get(name)
            .ok_or_else(|| CheckpointError::Malformed(format!("missing array {name}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.push(self.dtype.code());
        b.extend_from_slice(&self.step.to_le_bytes());
        b.extend_from_slice(&self.seed.to_le_bytes());
        let count = u32::try_from(self.arrays.len()).map_err(|_| CheckpointError::Malformed("too many arrays".into()))?;
        b.extend_from_slice(&count.to_le_bytes());
        for a in &self.arrays {
            let name = a.name.as_bytes();
            let len = u16::try_from(name.len())
                .map_err(|_| CheckpointError::Malformed(format!("array name too long: {}", a.name)))?;
            let ndim = u8::try_from(a.shape.len())
                .map_err(|_| CheckpointError::Malformed(format!("array {} has too many dims", a.name)))?;
            if a.shape.iter().product::<usize>() != a.data.len() {
                return Err(CheckpointError::Malformed(format!("array {} shape/data mismatch", a.name)));
            }
            b.extend_from_slice(&len.to_le_bytes());
            b.extend_from_slice(name);
            b.push(ndim);
            for &d in &a.shape {
                let d = u32::try_from(d).map_err(|_| CheckpointError::Malformed(format!("array {} dim overflow", a.name)))?;
                b.extend_from_slice(&d.to_le_bytes());
            }
            for &v in &a.data {
                match self.dtype {
                    DType::F32 => (v as f32).write_le(&mut b),
                    DType::F64 => v.write_le(&mut b),
                }
            }
        }
        let crc = crc32fast::hash(&b);
        b.extend_from_slice(&crc.to_le_bytes());
        Ok(b)
    }

    /// Parses a checkpoint, verifying magic and CRC before anything else.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            return Err(CheckpointError::Magic);
        }
        if bytes.len() < 8 {
            return Err(CheckpointError::Crc {
                stored: 0,
                computed: crc32fast::hash(bytes),
            });
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(CheckpointError::Crc { stored, computed });
        }
        let mut r = Reader { b: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let code = r.u8()?;
        let dtype = DType::from_code(code).ok_or_else(|| CheckpointError::Malformed(format!("dtype code {code}")))?;
        let step = r.u64()?;
        let seed = r.u64()?;
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| CheckpointError::Malformed("array name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| CheckpointError::Malformed(format!("array {name} size overflow")))?;
            let bytes = r.take(n.checked_mul(dtype.size_of()).ok_or_else(|| {
                CheckpointError::Malformed(format!("array {name} size overflow"))
            })?)?;
            let data = match dtype {
                DType::F32 => bytes.chunks_exact(4).map(|c| f32::read_le(c) as f64).collect(),
                DType::F64 => bytes.chunks_exact(8).map(f64::read_le).collect(),
            };
            arrays.push(NamedArray { name, shape, data });
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Malformed("trailing bytes after last array".into()));
        }
        Ok(Checkpoint {
            dtype,
            step,
            seed,
            arrays,
        })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.b.len())
            .ok_or_else(|| CheckpointError::Malformed("unexpected end of data".into()))?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Splits `v` into 16-bit chunks, least significant first; each chunk is
/// exact in either float width.
pub fn to_chunks(v: u128, n: usize) -> Vec<f64> {
    (0..n).map(|i| ((v >> (16 * i)) & 0xFFFF) as f64).collect()
}

pub fn from_chunks(chunks: &[f64]) -> Result<u128, CheckpointError> {
    let mut v = 0u128;
    for (i, &c) in chunks.iter().enumerate() {
        if !(0.0..65536.0).contains(&c) || c.fract() != 0.0 || i >= 8 {
            return Err(CheckpointError::Malformed(format!("bad integer chunk {c}")));
        }
        v |= (c as u128) << (16 * i);
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            dtype: DType::F32,
            step: 42,
            seed: 7,
            arrays: vec![
                NamedArray {
                    name: "a".into(),
                    shape: vec![2, 2],
                    data: vec![1.0, -2.5, 0.125, 3.0],
                },
                NamedArray::from_values("b", vec![0.1f32 as f64]),
            ],
        }
    }

    #[test]
    fn round_trip() {
        let c = sample();
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap(), c);
        let empty = Checkpoint {
            arrays: vec![],
            ..sample()
        };
        assert_eq!(Checkpoint::from_bytes(&empty.to_bytes().unwrap()).unwrap(), empty);
    }

    #[test]
    fn truncation_is_a_crc_error() {
        let b = sample().to_bytes().unwrap();
        for cut in [b.len() - 1, b.len() - 10, 9, 5] {
            assert!(matches!(Checkpoint::from_bytes(&b[..cut]), Err(CheckpointError::Crc { .. })), "cut {cut}");
        }
    }

    #[test]
    fn magic_and_version_errors() {
        let mut b = sample().to_bytes().unwrap();
        b[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&b), Err(CheckpointError::Magic)));
        let mut b = sample().to_bytes().unwrap();
        b[4] = 2;
        let n = b.len();
        let crc = crc32fast::hash(&b[..n - 4]);
        b[n - 4..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&b), Err(CheckpointError::Version(2))));
    }

    #[test]
    fn chunk_round_trip() {
        for v in [0u128, 1, 65535, 65536, u64::MAX as u128, u128::MAX >> 3] {
            assert_eq!(from_chunks(&to_chunks(v, 8)).unwrap(), v);
        }
    }
}

//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "GFCK" | version u32 | count u32
//! repeated count times:
//!   name_len u16 | name (UTF-8) | rank u8 | extents u32 × rank | f32 × Π extents
//! ```

use std::fs;
use std::path::Path;

use crate::error::{at_path, Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Ordered list of named `f32` tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            let len = u16::try_from(nb.len()).map_err(|_| Error::FormatMismatch(format!("name too long: {}", name)))?;
            let rank = u8::try_from(t.rank()).map_err(|_| Error::FormatMismatch(format!("rank too large: {}", name)))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(nb);
            out.push(rank);
            for &e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::FormatMismatch("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::FormatMismatch(format!("unsupported checkpoint version {}", version)));
        }
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::with_capacity(count.min(4096) as usize);
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
            let name =
                std::str::from_utf8(r.take(len, "name")?).map_err(|_| Error::FormatMismatch("tensor name is not UTF-8".into()))?.to_owned();
            let rank = r.take(1, "rank")?[0] as usize;
            let shape = (0..rank).map(|_| r.u32("extent").map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::SizeMismatch(name.clone()))?, "tensor data")?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::from_vec(&shape, data)
                .map_err(|_| Error::SizeMismatch(format!("tensor `{}` has invalid shape {:?}", name, shape)))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::SizeMismatch(format!("{} trailing bytes after last tensor", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()?).map_err(at_path(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode(&fs::read(path).map_err(at_path(path))?)
    }
}

pub(crate) struct Reader<'a> {
    pub buf: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::TruncatedPayload(format!("file ends while reading {}", what)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.push("enc.embed.W", Tensor::from_vec(&[2, 3], vec![1.0, -0.0, 2.5, f32::MIN_POSITIVE, 3.0, -7.25]).unwrap());
        c.push("head.q.b", Tensor::scalar(0.125));
        c
    }

    #[test]
    fn layout_is_exact() {
        let bytes = sample().encode().unwrap();
        assert_eq!(&bytes[..4], b"GFCK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u16::from_le_bytes(bytes[12..14].try_into().unwrap()), 11);
        assert_eq!(&bytes[14..25], b"enc.embed.W");
        assert_eq!(bytes[25], 2);
        // header 12 + (2+11+1+8+24) + (2+8+1+4+4)
        assert_eq!(bytes.len(), 12 + 46 + 19);
    }

    #[test]
    fn round_trip_bytes() {
        let bytes = sample().encode().unwrap();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.encode().unwrap(), bytes);
        assert_eq!(back.get("enc.embed.W").unwrap().data()[1].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn truncation_and_magic_errors() {
        let bytes = sample().encode().unwrap();
        assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 1]), Err(Error::TruncatedPayload(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::FormatMismatch(_))));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(Checkpoint::decode(&long), Err(Error::SizeMismatch(_))));
    }
}

//! Little-endian binary helpers and the `BTIN` batch file.
//!
//! A batch file is a 16-byte header followed by `f32` values in NHWC order:
//!
//! | offset | type    | field            |
//! |--------|---------|------------------|
//! | 0      | [u8; 4] | magic `BTIN`     |
//! | 4      | u32     | batch size N     |
//! | 8      | u16     | height           |
//! | 10     | u16     | width            |
//! | 12     | u16     | channels         |
//! | 14     | u16     | reserved, zero   |

use std::path::Path;

use crate::bconv::RealTensor;
use crate::error::{invalid, Error, Result};

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    pub(crate) fn corrupt(&self, msg: impl std::fmt::Display) -> Error {
        Error::CorruptFile(format!("{} at byte {}: {msg}", self.what, self.pos))
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.corrupt(format!("truncated, wanted {n} more bytes"))),
        }
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    /// A count whose payload of `elem` bytes per item must fit in the rest.
    pub(crate) fn count(&mut self, n: u64, elem: usize) -> Result<usize> {
        let left = (self.bytes.len() - self.pos) as u64;
        if n.checked_mul(elem as u64).is_none_or(|b| b > left) {
            return Err(self.corrupt(format!("count {n} exceeds the remaining {left} bytes")));
        }
        Ok(n as usize)
    }

    pub(crate) fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.array::<4>()? != *magic {
            return Err(self.corrupt(format!("bad magic, expected {}", String::from_utf8_lossy(magic))));
        }
        Ok(())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.corrupt(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

/// A batch of images in NHWC order.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f32>,
}

impl Batch {
    pub fn new(n: usize, h: usize, w: usize, c: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n * h * w * c {
            return Err(invalid(format!("{} values for a batch of {n}x{h}x{w}x{c}", data.len())));
        }
        if h > u16::MAX as usize || w > u16::MAX as usize || c > u16::MAX as usize || n > u32::MAX as usize {
            return Err(invalid("batch dims exceed the file header range"));
        }
        Ok(Self { n, h, w, c, data })
    }

    /// Uniform values in `[-1, 1)`.
    pub fn random(n: usize, h: usize, w: usize, c: usize, seed: u64) -> Self {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * h * w * c).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        Self { n, h, w, c, data }
    }

    /// HWNC real tensor for the engine.
    pub fn to_tensor(&self) -> Result<RealTensor> {
        RealTensor::from_nhwc(self.n, self.h, self.w, self.c, &self.data)
    }

    /// Images `start..end` as a new batch.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        let per = self.h * self.w * self.c;
        Self { n: end - start, data: self.data[start * per..end * per].to_vec(), ..*self }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.data.len());
        out.extend_from_slice(b"BTIN");
        out.extend_from_slice(&(self.n as u32).to_le_bytes());
        for d in [self.h, self.w, self.c, 0] {
            out.extend_from_slice(&(d as u16).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "batch file");
        r.magic(b"BTIN")?;
        let n = r.u32()? as usize;
        let (h, w, c) = (r.u16()? as usize, r.u16()? as usize, r.u16()? as usize);
        if r.u16()? != 0 {
            return Err(r.corrupt("reserved header field is not zero"));
        }
        let count = r.count((n as u64) * (h * w * c) as u64, 4)?;
        let data = (0..count).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Self::new(n, h, w, c, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_round_trip() {
        let b = Batch::random(3, 4, 5, 2, 7);
        let bytes = b.to_bytes();
        assert_eq!(bytes.len(), 16 + 4 * 3 * 4 * 5 * 2);
        assert_eq!(&bytes[..4], b"BTIN");
        assert_eq!(Batch::from_bytes(&bytes).unwrap(), b);
        assert!(matches!(Batch::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::CorruptFile(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Batch::from_bytes(&bad), Err(Error::CorruptFile(_))));
    }

    #[test]
    fn slice_keeps_images() {
        let b = Batch::random(4, 2, 2, 1, 1);
        let s = b.slice(1, 3);
        assert_eq!(s.n, 2);
        assert_eq!(s.data, b.data[4..12]);
    }
}

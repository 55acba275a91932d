//! Little-endian encoding helpers shared by every binary format.

use crate::error::{Error, Result};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Width of stored floats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn tag(self) -> u8 {
        match self {
            Precision::F32 => 0,
            Precision::F64 => 1,
        }
    }

    pub fn width(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

#[derive(Debug, Default)]
pub struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn floats(&mut self, values: &[f64], precision: Precision) {
        self.buf.reserve(values.len() * precision.width());
        for &v in values {
            match precision {
                Precision::F32 => self.bytes(&(v as f32).to_le_bytes()),
                Precision::F64 => self.f64(v),
            }
        }
    }

    /// Appends the FNV-1a of everything written so far and returns the buffer.
    pub fn finish_with_checksum(mut self) -> Vec<u8> {
        let h = fnv1a(&self.buf);
        self.u64(h);
        self.buf
    }
}

/// Bounds-checked cursor; every failure reports the byte offset.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8], what: &'static str) -> Self {
        Reader { buf, pos: 0, what }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn malformed(&self, message: impl Into<String>) -> Error {
        Error::Malformed {
            what: self.what,
            offset: self.pos,
            message: message.into(),
        }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Truncated {
                what: self.what,
                offset: self.pos,
                needed: n,
                available: self.remaining(),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    /// Fails with `Truncated` unless `count * width` more bytes are present.
    pub fn ensure(&self, count: u64, width: usize) -> Result<usize> {
        let needed = (count as u128) * (width as u128);
        if needed > self.remaining() as u128 {
            return Err(Error::Truncated {
                what: self.what,
                offset: self.pos,
                needed: needed.min(usize::MAX as u128) as usize,
                available: self.remaining(),
            });
        }
        Ok(count as usize)
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let found = self.take(4)?;
        if found != expected {
            return Err(Error::BadMagic {
                what: self.what,
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        Ok(())
    }

    pub fn version(&mut self, supported: u32) -> Result<()> {
        let found = self.u32()?;
        if found != supported {
            return Err(Error::UnsupportedVersion {
                what: self.what,
                found,
                supported,
            });
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn precision(&mut self) -> Result<Precision> {
        match self.u8()? {
            0 => Ok(Precision::F32),
            1 => Ok(Precision::F64),
            t => {
                self.pos -= 1;
                Err(self.malformed(format!("unknown precision tag {t}")))
            }
        }
    }

    /// Reads `count` floats, rejecting non-finite values.
    pub fn floats(&mut self, count: u64, precision: Precision) -> Result<Vec<f64>> {
        let start = self.pos;
        let out = self.raw_floats(count, precision)?;
        if let Some(i) = out.iter().position(|v| !v.is_finite()) {
            return Err(Error::Malformed {
                what: self.what,
                offset: start + i * precision.width(),
                message: "non-finite value".into(),
            });
        }
        Ok(out)
    }

    /// Reads `count` floats as stored, NaN and infinities included.
    pub fn raw_floats(&mut self, count: u64, precision: Precision) -> Result<Vec<f64>> {
        let n = self.ensure(count, precision.width())?;
        let raw = self.take(n * precision.width())?;
        let out: Vec<f64> = match precision {
            Precision::F32 => raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect(),
            Precision::F64 => raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        };
        Ok(out)
    }

    /// Verifies the trailing FNV-1a over everything before it and that nothing follows.
    pub fn checksum(&mut self) -> Result<()> {
        let body_end = self.pos;
        let stored = self.u64()?;
        let computed = fnv1a(&self.buf[..body_end]);
        if stored != computed {
            return Err(Error::Checksum {
                what: self.what,
                stored,
                computed,
            });
        }
        if self.remaining() != 0 {
            return Err(self.malformed(format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn truncation_reports_offset() {
        let mut r = Reader::new(&[1, 2, 3], "test");
        r.u8().unwrap();
        match r.u32() {
            Err(Error::Truncated {
                offset,
                needed,
                available,
                ..
            }) => {
                assert_eq!((offset, needed, available), (1, 4, 2));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn huge_counts_do_not_allocate() {
        let r = Reader::new(&[0; 16], "test");
        assert!(matches!(r.ensure(u64::MAX, 8), Err(Error::Truncated { .. })));
    }
}

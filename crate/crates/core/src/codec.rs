//! Little-endian byte framing shared by the volume and checkpoint formats.

use crate::error::{Error, Result};

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut w = Self { buf: Vec::new() };
        w.bytes(magic);
        w.u32(version);
        w
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

    pub fn len_u32(&mut self, what: &'static str, n: usize) -> Result<()> {
        let n = u32::try_from(n).map_err(|_| Error::Format {
            what,
            reason: format!("length {n} exceeds u32"),
        })?;
        self.u32(n);
        Ok(())
    }

    /// Length-prefixed UTF-8.
    pub fn str(&mut self, what: &'static str, s: &str) -> Result<()> {
        self.len_u32(what, s.len())?;
        self.bytes(s.as_bytes());
        Ok(())
    }

    /// Rank as u8 followed by u32 dims.
    pub fn dims(&mut self, what: &'static str, dims: &[usize]) -> Result<()> {
        let rank = u8::try_from(dims.len()).map_err(|_| Error::Format {
            what,
            reason: format!("rank {} exceeds 255", dims.len()),
        })?;
        self.u8(rank);
        for &d in dims {
            self.len_u32(what, d)?;
        }
        Ok(())
    }

    pub fn f32s(&mut self, values: &[f32]) {
        self.buf.reserve(values.len() * 4);
        for v in values {
            self.bytes(&v.to_le_bytes());
        }
    }

    /// Appends the CRC32 of everything written so far.
    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    what: &'static str,
    buf: &'a [u8],
    pos: usize,
    stored_crc: u32,
}

impl<'a> Reader<'a> {
    /// Checks magic and version and positions the cursor after them. The
    /// trailing checksum is verified by [`Reader::finish`], so truncation
    /// surfaces as such rather than as a checksum mismatch.
    pub fn open(
        what: &'static str,
        bytes: &'a [u8],
        magic: &[u8; 4],
        version: u32,
    ) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Truncated { what });
        }
        let found: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if &found != magic {
            return Err(Error::BadMagic {
                what,
                expected: *magic,
                found,
            });
        }
        if bytes.len() < 12 {
            return Err(Error::Truncated { what });
        }
        let found = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if found != version {
            return Err(Error::UnsupportedVersion {
                what,
                expected: version,
                found,
            });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        Ok(Self {
            what,
            buf: body,
            pos: 8,
            stored_crc: u32::from_le_bytes(tail.try_into().expect("4 bytes")),
        })
    }

    pub fn format_error(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            what: self.what,
            reason: reason.into(),
        }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(Error::Truncated { what: self.what })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.format_error("string is not UTF-8"))
    }

    /// Reads rank and dims; returns the dims and their element count.
    pub fn dims(&mut self) -> Result<(Vec<usize>, usize)> {
        let rank = self.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        let mut count: usize = 1;
        for _ in 0..rank {
            let d = self.u32()? as usize;
            if d == 0 {
                return Err(self.format_error("zero-sized dimension"));
            }
            count = count
                .checked_mul(d)
                .ok_or_else(|| self.format_error("dimension product overflows"))?;
            dims.push(d);
        }
        if count > self.remaining() {
            return Err(Error::Truncated { what: self.what });
        }
        Ok((dims, count))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| self.format_error("element count overflows"))?;
        let raw = self.take(bytes)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    /// Requires the body to be fully consumed and the checksum to match.
    pub fn finish(self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(self.format_error(format!("{} trailing bytes", self.remaining())));
        }
        let stored = self.stored_crc;
        let computed = crc32fast::hash(self.buf);
        if stored != computed {
            return Err(Error::Checksum {
                what: self.what,
                stored,
                computed,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let mut w = Writer::new(b"TEST", 3);
        w.str("t", "hello").unwrap();
        w.dims("t", &[2, 3]).unwrap();
        w.f32s(&[1.0, -2.5, 3.0, 0.0, 5.0, 6.0]);
        w.u64(u64::MAX);
        let bytes = w.finish();

        let mut r = Reader::open("t", &bytes, b"TEST", 3).unwrap();
        assert_eq!(r.str().unwrap(), "hello");
        let (dims, n) = r.dims().unwrap();
        assert_eq!((dims, n), (vec![2, 3], 6));
        assert_eq!(r.f32s(n).unwrap(), vec![1.0, -2.5, 3.0, 0.0, 5.0, 6.0]);
        assert_eq!(r.u64().unwrap(), u64::MAX);
        r.finish().unwrap();

        assert!(matches!(
            Reader::open("t", &bytes, b"NOPE", 3),
            Err(Error::BadMagic { .. })
        ));
        assert!(matches!(
            Reader::open("t", &bytes, b"TEST", 4),
            Err(Error::UnsupportedVersion { .. })
        ));
        let mut flipped = bytes.clone();
        flipped[14] ^= 1;
        let mut r = Reader::open("t", &flipped, b"TEST", 3).unwrap();
        r.str().unwrap();
        let (_, n) = r.dims().unwrap();
        r.f32s(n).unwrap();
        r.u64().unwrap();
        assert!(matches!(r.finish(), Err(Error::Checksum { .. })));

        assert!(matches!(
            Reader::open("t", &bytes[..6], b"TEST", 3),
            Err(Error::Truncated { .. })
        ));
        let mut r = Reader::open("t", &bytes[..25], b"TEST", 3).unwrap();
        r.str().unwrap();
        assert!(matches!(r.dims(), Err(Error::Truncated { .. })));
    }
}

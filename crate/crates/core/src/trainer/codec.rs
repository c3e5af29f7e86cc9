//! Little-endian primitives and tagged sections shared by the checkpoint
//! and packed-model formats.

use crate::error::{Error, Result};

/// Written as a little-endian u32; reads back differently on a mismatched
/// byte order.
pub const ENDIAN_TAG: u32 = 0x0A0B_0C0D;

#[derive(Default)]
pub struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn f32s(&mut self, v: &[f32]) {
        self.u32(v.len() as u32);
        for &x in v {
            self.f32(x);
        }
    }

    pub fn u64s(&mut self, v: &[u64]) {
        self.u32(v.len() as u32);
        for &x in v {
            self.u64(x);
        }
    }

    pub fn dims(&mut self, d: &[usize]) {
        self.u32(d.len() as u32);
        for &x in d {
            self.u32(x as u32);
        }
    }

    /// Tag, byte length, body.
    pub fn section(&mut self, tag: &[u8; 4], body: &[u8]) {
        self.buf.extend_from_slice(tag);
        self.u64(body.len() as u64);
        self.buf.extend_from_slice(body);
    }

    pub fn header(&mut self, magic: &[u8; 4], version: u32) {
        self.buf.extend_from_slice(magic);
        self.u32(version);
        self.u32(ENDIAN_TAG);
    }
}

pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Reader { bytes, pos: 0, what }
    }

    pub fn err(&self, m: impl std::fmt::Display) -> Error {
        Error::Format(format!("{} at byte {}: {m}", self.what, self.pos))
    }

    pub fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }

    pub fn finish(&self) -> Result<()> {
        if self.is_done() {
            Ok(())
        } else {
            Err(self.err(format!("{} trailing bytes", self.bytes.len() - self.pos)))
        }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| self.err("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
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

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.err("invalid utf-8"))
    }

    fn count(&mut self, elem: usize) -> Result<usize> {
        let n = self.u32()? as usize;
        if n.saturating_mul(elem) > self.bytes.len() - self.pos {
            return Err(self.err(format!("length {n} runs past the end")));
        }
        Ok(n)
    }

    pub fn f32s(&mut self) -> Result<Vec<f32>> {
        let n = self.count(4)?;
        (0..n).map(|_| self.f32()).collect()
    }

    pub fn u64s(&mut self) -> Result<Vec<u64>> {
        let n = self.count(8)?;
        (0..n).map(|_| self.u64()).collect()
    }

    pub fn dims(&mut self) -> Result<Vec<usize>> {
        let n = self.count(4)?;
        (0..n).map(|_| self.u32().map(|v| v as usize)).collect()
    }

    pub fn section(&mut self) -> Result<([u8; 4], &'a [u8])> {
        let tag: [u8; 4] = self.take(4)?.try_into().unwrap();
        let len = self.u64()?;
        let len = usize::try_from(len).map_err(|_| self.err("section too large"))?;
        Ok((tag, self.take(len)?))
    }

    /// Next section, which must carry `tag`.
    pub fn expect(&mut self, tag: &[u8; 4]) -> Result<&'a [u8]> {
        let (t, body) = self.section()?;
        if &t != tag {
            return Err(self.err(format!(
                "expected section {}, found {}",
                String::from_utf8_lossy(tag),
                String::from_utf8_lossy(&t)
            )));
        }
        Ok(body)
    }

    /// Checks magic, endianness and version; returns the version.
    pub fn header(&mut self, magic: &[u8; 4], supported: u32) -> Result<u32> {
        let m = self.take(4).map_err(|_| self.err("file too short for a header"))?;
        if m != magic {
            return Err(self.err(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(m),
                String::from_utf8_lossy(magic)
            )));
        }
        let version = self.u32()?;
        let tag = self.u32()?;
        if tag != ENDIAN_TAG {
            return Err(self.err(format!("endianness tag {tag:#010x} does not match {ENDIAN_TAG:#010x}")));
        }
        if version != supported {
            return Err(self.err(format!("unsupported version {version}, this build reads {supported}")));
        }
        Ok(version)
    }
}

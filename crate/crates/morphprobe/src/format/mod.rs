//! Binary artifact formats. All multi-byte values are little-endian and every
//! file ends with a CRC32 of all preceding bytes.

pub mod cache;
pub mod checkpoint;
pub mod control;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FormatError {
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {found} (this build reads {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("file too short: {len} bytes")]
    Truncated { len: usize },
    #[error("{0} unexpected trailing bytes before the checksum")]
    TrailingBytes(usize),
    #[error("label-space digest {found} does not match the bound label space {expected}")]
    LabelDigest { expected: String, found: String },
    #[error("invalid contents: {0}")]
    Invalid(String),
}

/// Appends fields to a byte buffer.
#[derive(Default)]
pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(b);
        self
    }
    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.bytes(&[v])
    }
    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.bytes(&v.to_le_bytes())
    }
    pub fn i32(&mut self, v: i32) -> &mut Self {
        self.bytes(&v.to_le_bytes())
    }
    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.bytes(&v.to_le_bytes())
    }
    pub fn f32(&mut self, v: f32) -> &mut Self {
        self.bytes(&v.to_le_bytes())
    }
    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.bytes(&v.to_le_bytes())
    }

    /// Appends the CRC32 of everything written so far.
    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

/// Reads fields from a checksummed body, after magic, version and checksum
/// have been validated by [`open`].
pub(crate) struct Reader<'a> {
    body: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.body.len())
            .ok_or_else(|| FormatError::Invalid(format!("field at byte {} runs past the end", self.pos)))?;
        let s = &self.body[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N], FormatError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    pub fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.array::<1>()?[0])
    }
    pub fn u32(&mut self) -> Result<u32, FormatError> {
        self.array().map(u32::from_le_bytes)
    }
    pub fn i32(&mut self) -> Result<i32, FormatError> {
        self.array().map(i32::from_le_bytes)
    }
    pub fn u64(&mut self) -> Result<u64, FormatError> {
        self.array().map(u64::from_le_bytes)
    }
    pub fn f64(&mut self) -> Result<f64, FormatError> {
        self.array().map(f64::from_le_bytes)
    }
    pub fn remaining(&self) -> usize {
        self.body.len() - self.pos
    }
    pub fn finish(self) -> Result<(), FormatError> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(FormatError::TrailingBytes(n)),
        }
    }
}

/// Checks magic, version and the trailing checksum (in that order) and
/// returns a reader positioned after the version field.
pub(crate) fn open<'a>(bytes: &'a [u8], magic: [u8; 4], version: u32) -> Result<Reader<'a>, FormatError> {
    let found: [u8; 4] = match bytes.get(..4) {
        Some(m) => m.try_into().expect("four bytes"),
        None => return Err(FormatError::Truncated { len: bytes.len() }),
    };
    if found != magic {
        return Err(FormatError::BadMagic { expected: magic, found });
    }
    let v = bytes
        .get(4..8)
        .map(|b| u32::from_le_bytes(b.try_into().expect("four bytes")))
        .ok_or(FormatError::Truncated { len: bytes.len() })?;
    if v != version {
        return Err(FormatError::UnsupportedVersion {
            found: v,
            supported: version,
        });
    }
    if bytes.len() < 12 {
        return Err(FormatError::Truncated { len: bytes.len() });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("four bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(FormatError::Checksum { stored, computed });
    }
    Ok(Reader { body, pos: 8 })
}

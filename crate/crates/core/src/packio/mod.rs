//! On-disk formats: model checkpoints ("SLQM") and packed quantized
//! artifacts ("SLQ1"). Everything is little-endian and carries a CRC32
//! footer over all preceding bytes.

mod artifact;
mod bits;
mod checkpoint;

pub use artifact::{pack, storage_report, unpack, PackedArtifact, RawTensor, StorageReport, StorageRow, ARTIFACT_VERSION};
pub use bits::{pack_codes, packed_len, unpack_codes};
pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_VERSION,
};

/// Structured decode failures. Each variant has a distinct numeric code.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: Vec<u8> },
    #[error("format version {found} is newer than supported version {supported}")]
    Version { found: u32, supported: u32 },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("truncated input while reading {0}")]
    Truncated(&'static str),
    #[error("malformed content: {0}")]
    Malformed(String),
}

impl FormatError {
    pub fn code(&self) -> u8 {
        match self {
            Self::BadMagic { .. } => 1,
            Self::Version { .. } => 2,
            Self::Checksum { .. } => 3,
            Self::Truncated(_) => 4,
            Self::Malformed(_) => 5,
        }
    }
}

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut w = Self { buf: Vec::new() };
        w.bytes(magic);
        w.u32(version);
        w.u64(0);
        w
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn i32(&mut self, v: i32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    /// Length-prefixed UTF-8 string.
    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }

    pub fn shape(&mut self, shape: &[usize]) {
        self.u8(shape.len() as u8);
        for &d in shape {
            self.u32(d as u32);
        }
    }

    /// Patches the total length into the header and appends the CRC.
    pub fn finish(mut self) -> Vec<u8> {
        let total = (self.buf.len() + 4) as u64;
        self.buf[8..16].copy_from_slice(&total.to_le_bytes());
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Checks magic, version, declared length and CRC, in that order. The
    /// returned reader is positioned after the fixed header and stops before
    /// the footer.
    pub fn open(bytes: &'a [u8], magic: &[u8; 4], supported: u32) -> Result<(Self, u32), FormatError> {
        if bytes.len() < 4 || &bytes[..4] != magic {
            return Err(FormatError::BadMagic {
                expected: *magic,
                found: bytes[..bytes.len().min(4)].to_vec(),
            });
        }
        if bytes.len() < 8 {
            return Err(FormatError::Truncated("header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version > supported {
            return Err(FormatError::Version { found: version, supported });
        }
        if bytes.len() < 20 {
            return Err(FormatError::Truncated("header"));
        }
        let declared = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        if declared > bytes.len() as u64 {
            return Err(FormatError::Truncated("body"));
        }
        if declared < bytes.len() as u64 {
            return Err(FormatError::Malformed(format!(
                "{} bytes after declared end",
                bytes.len() as u64 - declared
            )));
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(FormatError::Checksum { stored, computed });
        }
        if version == 0 {
            return Err(FormatError::Malformed("version 0".into()));
        }
        Ok((Self { buf: body, pos: 16 }, version))
    }

    pub fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).ok_or(FormatError::Truncated(what))?;
        if end > self.buf.len() {
            return Err(FormatError::Truncated(what));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self, what: &'static str) -> Result<u8, FormatError> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u32(&mut self, what: &'static str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn i32(&mut self, what: &'static str) -> Result<i32, FormatError> {
        Ok(i32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn f32s(&mut self, n: usize, what: &'static str) -> Result<Vec<f32>, FormatError> {
        let len = n.checked_mul(4).ok_or(FormatError::Truncated(what))?;
        let raw = self.take(len, what)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn str(&mut self, what: &'static str) -> Result<String, FormatError> {
        let n = self.u32(what)? as usize;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| FormatError::Malformed(format!("{what} is not UTF-8")))
    }

    pub fn shape(&mut self, what: &'static str) -> Result<Vec<usize>, FormatError> {
        let nd = self.u8(what)? as usize;
        (0..nd).map(|_| self.u32(what).map(|d| d as usize)).collect()
    }

    pub fn finish(self) -> Result<(), FormatError> {
        if self.pos != self.buf.len() {
            return Err(FormatError::Malformed(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Product of dims, rejecting sizes that cannot fit in the `remaining`
/// bytes at `bits_per` bits per element before anything is allocated.
pub(crate) fn checked_numel(shape: &[usize], remaining: usize, bits_per: usize) -> Result<usize, FormatError> {
    let mut n: usize = 1;
    for &d in shape {
        n = n.checked_mul(d).ok_or_else(|| FormatError::Malformed(format!("shape {shape:?} overflows")))?;
    }
    if n.saturating_mul(bits_per) > remaining.saturating_mul(8) {
        return Err(FormatError::Truncated("tensor data"));
    }
    Ok(n)
}

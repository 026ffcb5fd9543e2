//! Little-endian framing shared by the model and dataset files: a 4-byte
//! magic, a `u32` version, the body, then a CRC-32 of everything before it.

use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: Vec<u8>, expected: [u8; 4] },
    #[error("unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("header and payload disagree: {0}")]
    ShapeInconsistent(String),
    #[error("invalid utf-8 in class name")]
    BadString,
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl WireError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        WireError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut w = Writer { buf: Vec::new() };
        w.buf.extend_from_slice(magic);
        w.u32(version);
        w
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn strings(&mut self, items: &[String]) {
        self.u32(items.len() as u32);
        for s in items {
            self.u32(s.len() as u32);
            self.buf.extend_from_slice(s.as_bytes());
        }
    }

    /// Writes values at single precision.
    pub fn f32s(&mut self, values: &[f64]) {
        self.buf.reserve(values.len() * 4);
        for &v in values {
            self.buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Checks magic and version. The checksum is verified by [`Reader::finish`].
    pub fn open(data: &'a [u8], magic: &[u8; 4], version: u32) -> Result<Self, WireError> {
        if data.len() < 4 || &data[..4] != magic {
            return Err(WireError::BadMagic {
                found: data[..data.len().min(4)].to_vec(),
                expected: *magic,
            });
        }
        let mut r = Reader { data, pos: 4 };
        let found = r.u32()?;
        if found != version {
            return Err(WireError::UnsupportedVersion {
                found,
                supported: version,
            });
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.data.len() - self.pos < n {
            return Err(WireError::ShapeInconsistent(format!(
                "needed {n} more bytes at offset {}, file has {}",
                self.pos,
                self.data.len()
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn strings(&mut self) -> Result<Vec<String>, WireError> {
        let n = self.u32()? as usize;
        (0..n)
            .map(|_| {
                let len = self.u32()? as usize;
                let bytes = self.take(len)?;
                String::from_utf8(bytes.to_vec()).map_err(|_| WireError::BadString)
            })
            .collect()
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f64>, WireError> {
        let bytes = self.take(n * 4)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect())
    }

    /// Fails unless exactly `payload` bytes plus the trailing checksum remain.
    pub fn expect_remaining(&self, payload: usize) -> Result<(), WireError> {
        let left = self.data.len() - self.pos;
        if left != payload + 4 {
            return Err(WireError::ShapeInconsistent(format!(
                "header implies {payload} payload bytes, file has {}",
                left.saturating_sub(4)
            )));
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<(), WireError> {
        let body_end = self.pos;
        let stored = self.u32()?;
        if self.pos != self.data.len() {
            return Err(WireError::ShapeInconsistent(format!(
                "{} trailing bytes after checksum",
                self.data.len() - self.pos
            )));
        }
        let computed = crc32fast::hash(&self.data[..body_end]);
        if stored != computed {
            return Err(WireError::ChecksumMismatch { stored, computed });
        }
        Ok(())
    }
}

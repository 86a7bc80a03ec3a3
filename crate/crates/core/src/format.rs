//! Binary container shared by body, pose and checkpoint files, plus atomic
//! file writes.
//!
//! Layout: 8-byte magic, little-endian `u32` header length, UTF-8 JSON
//! header, then raw little-endian numeric blocks in the order the header
//! declares. Readers report the byte offset of any truncation.

use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    Magic { expected: String, found: String },
    #[error("truncated file: {what} needs {need} bytes at byte offset {offset}, only {have} left")]
    Truncated {
        what: String,
        offset: usize,
        need: usize,
        have: usize,
    },
    #[error("header at byte offset 12: {0}")]
    Header(String),
    #[error("{extra} unexpected trailing bytes at byte offset {offset}")]
    Trailing { offset: usize, extra: usize },
    #[error("{what} at byte offset {offset}: {message}")]
    Value {
        what: String,
        offset: usize,
        message: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub struct ContainerWriter {
    buf: Vec<u8>,
}

impl ContainerWriter {
    pub fn new(magic: &[u8; 8], header: &impl Serialize) -> Self {
        let json = serde_json::to_vec(header).expect("headers serialize");
        let mut buf = Vec::with_capacity(12 + json.len());
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);
        Self { buf }
    }

    pub fn f32s(&mut self, values: impl IntoIterator<Item = f64>) -> &mut Self {
        for v in values {
            self.buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        self
    }

    pub fn f64s(&mut self, values: impl IntoIterator<Item = f64>) -> &mut Self {
        for v in values {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        self
    }

    pub fn u32s(&mut self, values: impl IntoIterator<Item = u32>) -> &mut Self {
        for v in values {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        self
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct ContainerReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ContainerReader<'a> {
    /// Checks the magic and parses the header.
    pub fn open<H: DeserializeOwned>(
        bytes: &'a [u8],
        magic: &[u8; 8],
    ) -> Result<(H, Self), FormatError> {
        let mut r = Self { bytes, pos: 0 };
        let m = r.take(8, "magic")?;
        if m != magic {
            return Err(FormatError::Magic {
                expected: String::from_utf8_lossy(magic).into_owned(),
                found: String::from_utf8_lossy(m).into_owned(),
            });
        }
        let len = u32::from_le_bytes(r.take(4, "header length")?.try_into().unwrap()) as usize;
        let json = r.take(len, "header")?;
        let header =
            serde_json::from_slice(json).map_err(|e| FormatError::Header(e.to_string()))?;
        Ok((header, r))
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], FormatError> {
        let have = self.bytes.len() - self.pos;
        if n > have {
            return Err(FormatError::Truncated {
                what: what.to_string(),
                offset: self.pos,
                need: n,
                have,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn take_block(
        &mut self,
        count: usize,
        width: usize,
        what: &str,
    ) -> Result<&'a [u8], FormatError> {
        let n = count.checked_mul(width).ok_or_else(|| FormatError::Value {
            what: what.to_string(),
            offset: self.pos,
            message: format!("element count {count} overflows"),
        })?;
        self.take(n, what)
    }

    /// Reads `count` f32 values, widened to f64; rejects non-finite values.
    pub fn f32s(&mut self, count: usize, what: &str) -> Result<Vec<f64>, FormatError> {
        let start = self.pos;
        let raw = self.take_block(count, 4, what)?;
        raw.chunks_exact(4)
            .enumerate()
            .map(|(i, c)| {
                let v = f32::from_le_bytes(c.try_into().unwrap()) as f64;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(FormatError::Value {
                        what: what.to_string(),
                        offset: start + 4 * i,
                        message: "non-finite value".into(),
                    })
                }
            })
            .collect()
    }

    pub fn f64s(&mut self, count: usize, what: &str) -> Result<Vec<f64>, FormatError> {
        let raw = self.take_block(count, 8, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn u32s(&mut self, count: usize, what: &str) -> Result<Vec<u32>, FormatError> {
        let raw = self.take_block(count, 4, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn finish(self) -> Result<(), FormatError> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(FormatError::Trailing {
                offset: self.pos,
                extra: self.bytes.len() - self.pos,
            })
        }
    }
}

/// Writes to a temporary file in the target directory, then renames it
/// over `path`, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

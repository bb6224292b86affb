//! Reading function bytes out of flat files.
//!
//! The tool never interprets container formats: a function is a byte range of
//! a file, optionally relocated to a virtual base address.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("range out of bounds: offset {offset} + size {size} exceeds file length {file_len}")]
    RangeOutOfBounds {
        offset: u64,
        size: u64,
        file_len: u64,
    },
    #[error("image at {base:#010x} with {len} bytes wraps past the 32-bit address space")]
    AddressWrap { base: u32, len: usize },
    #[error("malformed hex token {token:?}")]
    MalformedHex { token: String },
}

/// The raw bytes of one function, placed at a virtual address.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionImage {
    bytes: Vec<u8>,
    base_addr: u32,
}

impl FunctionImage {
    /// Builds an image, rejecting empty byte sequences and images that would
    /// wrap around the end of the address space.
    pub fn new(bytes: Vec<u8>, base_addr: u32) -> Result<Self, LoadError> {
        if bytes.is_empty() {
            return Err(LoadError::RangeOutOfBounds {
                offset: 0,
                size: 0,
                file_len: 0,
            });
        }
        if u64::from(base_addr) + bytes.len() as u64 > 1u64 << 32 {
            return Err(LoadError::AddressWrap {
                base: base_addr,
                len: bytes.len(),
            });
        }
        Ok(Self { bytes, base_addr })
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn base_addr(&self) -> u32 {
        self.base_addr
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    /// Always false; images are non-empty by construction.
    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    /// One past the last mapped address, as a 64-bit value so that an image
    /// ending exactly at 2^32 is representable.
    pub fn end_addr(&self) -> u64 {
        u64::from(self.base_addr) + self.bytes.len() as u64
    }

    pub fn contains(&self, addr: u32) -> bool {
        addr >= self.base_addr && u64::from(addr) < self.end_addr()
    }

    /// Bytes from `addr` to the end of the image, or `None` when `addr` is
    /// outside it.
    pub fn slice_from(&self, addr: u32) -> Option<&[u8]> {
        if !self.contains(addr) {
            return None;
        }
        Some(&self.bytes[(addr - self.base_addr) as usize..])
    }
}

/// Reads `size` bytes at file offset `offset`. The virtual base address
/// defaults to the file offset.
pub fn load(
    path: impl AsRef<Path>,
    offset: u64,
    size: u64,
    base_addr: Option<u32>,
) -> Result<FunctionImage, LoadError> {
    let path = path.as_ref();
    let data = std::fs::read(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            LoadError::FileNotFound(path.to_path_buf())
        } else {
            LoadError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    })?;
    let file_len = data.len() as u64;
    let out_of_bounds = LoadError::RangeOutOfBounds {
        offset,
        size,
        file_len,
    };
    if size == 0 {
        return Err(out_of_bounds);
    }
    let end = match offset.checked_add(size) {
        Some(end) if end <= file_len => end,
        _ => return Err(out_of_bounds),
    };
    let base = match base_addr {
        Some(b) => b,
        None => u32::try_from(offset).map_err(|_| LoadError::AddressWrap {
            base: u32::MAX,
            len: size as usize,
        })?,
    };
    FunctionImage::new(data[offset as usize..end as usize].to_vec(), base)
}

/// Parses whitespace-separated hex byte pairs such as `"89 C8 01 D0 C3"`.
pub fn parse_hex(text: &str) -> Result<Vec<u8>, LoadError> {
    text.split_whitespace()
        .map(|token| {
            if token.len() != 2 {
                return Err(LoadError::MalformedHex {
                    token: token.to_string(),
                });
            }
            u8::from_str_radix(token, 16).map_err(|_| LoadError::MalformedHex {
                token: token.to_string(),
            })
        })
        .collect()
}

/// Renders bytes as uppercase space-separated pairs; inverse of [`parse_hex`].
pub fn format_hex(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 3);
    for (i, b) in bytes.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{b:02X}");
    }
    out
}

//! Shared binary framing for checkpoints, traces, and caches.
//!
//! Every persisted array uses the same block layout: a u32 name length, the
//! UTF-8 name, a u32 rank, u32 dims, then the payload as IEEE-754 binary32
//! little-endian in row-major order. Container files put a magic string,
//! a u32 version, and container-specific fields in front.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use firstframe_tensor::{Array, Scalar};

use crate::error::ArtifactError;

pub fn io_err(path: &Path, e: std::io::Error) -> ArtifactError {
    ArtifactError::Io {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

fn truncated(path: &Path, detail: &str) -> ArtifactError {
    ArtifactError::Truncated {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    }
}

pub struct BlockWriter<'a> {
    w: BufWriter<File>,
    path: &'a Path,
}

impl<'a> BlockWriter<'a> {
    pub fn create(path: &'a Path, magic: &[u8], version: u32) -> Result<Self, ArtifactError> {
        let file = File::create(path).map_err(|e| io_err(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(magic).map_err(|e| io_err(path, e))?;
        w.write_all(&version.to_le_bytes())
            .map_err(|e| io_err(path, e))?;
        Ok(Self { w, path })
    }

    pub fn u32(&mut self, v: u32) -> Result<(), ArtifactError> {
        self.w
            .write_all(&v.to_le_bytes())
            .map_err(|e| io_err(self.path, e))
    }

    pub fn u64(&mut self, v: u64) -> Result<(), ArtifactError> {
        self.w
            .write_all(&v.to_le_bytes())
            .map_err(|e| io_err(self.path, e))
    }

    pub fn f32(&mut self, v: f32) -> Result<(), ArtifactError> {
        self.w
            .write_all(&v.to_le_bytes())
            .map_err(|e| io_err(self.path, e))
    }

    pub fn str(&mut self, s: &str) -> Result<(), ArtifactError> {
        self.u32(s.len() as u32)?;
        self.w
            .write_all(s.as_bytes())
            .map_err(|e| io_err(self.path, e))
    }

    pub fn f32_slice(&mut self, values: &[f32]) -> Result<(), ArtifactError> {
        for &v in values {
            self.f32(v)?;
        }
        Ok(())
    }

    /// One named-array block.
    pub fn array<T: Scalar>(&mut self, name: &str, a: &Array<T>) -> Result<(), ArtifactError> {
        self.str(name)?;
        self.u32(a.shape().len() as u32)?;
        for &d in a.shape() {
            self.u32(d as u32)?;
        }
        for &v in a.data() {
            self.f32(v.to_f32())?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<(), ArtifactError> {
        self.w.flush().map_err(|e| io_err(self.path, e))
    }
}

pub struct BlockReader {
    r: BufReader<File>,
    path: PathBuf,
}

impl BlockReader {
    pub fn open(path: &Path, magic: &[u8], version: u32) -> Result<Self, ArtifactError> {
        let file = File::open(path).map_err(|e| io_err(path, e))?;
        let mut r = BufReader::new(file);
        let mut got = vec![0u8; magic.len()];
        r.read_exact(&mut got)
            .map_err(|_| truncated(path, "missing magic"))?;
        if got != magic {
            return Err(ArtifactError::BadMagic {
                path: path.to_path_buf(),
                expected: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        let mut rd = Self {
            r,
            path: path.to_path_buf(),
        };
        let got_version = rd.u32()?;
        if got_version != version {
            return Err(ArtifactError::Version {
                path: path.to_path_buf(),
                got: got_version,
                supported: version,
            });
        }
        Ok(rd)
    }

    pub fn u32(&mut self) -> Result<u32, ArtifactError> {
        let mut b = [0u8; 4];
        self.r
            .read_exact(&mut b)
            .map_err(|_| truncated(&self.path, "u32 field"))?;
        Ok(u32::from_le_bytes(b))
    }

    /// Like [`Self::u32`] but clean EOF yields `None`; a partial read is
    /// still a truncation error.
    pub fn try_u32(&mut self) -> Result<Option<u32>, ArtifactError> {
        let mut b = [0u8; 4];
        let mut filled = 0usize;
        while filled < 4 {
            match self.r.read(&mut b[filled..]) {
                Ok(0) => {
                    return if filled == 0 {
                        Ok(None)
                    } else {
                        Err(truncated(&self.path, "partial u32 at end of file"))
                    }
                }
                Ok(n) => filled += n,
                Err(e) => return Err(io_err(&self.path, e)),
            }
        }
        Ok(Some(u32::from_le_bytes(b)))
    }

    pub fn u64(&mut self) -> Result<u64, ArtifactError> {
        let mut b = [0u8; 8];
        self.r
            .read_exact(&mut b)
            .map_err(|_| truncated(&self.path, "u64 field"))?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn f32(&mut self) -> Result<f32, ArtifactError> {
        let mut b = [0u8; 4];
        self.r
            .read_exact(&mut b)
            .map_err(|_| truncated(&self.path, "f32 field"))?;
        Ok(f32::from_le_bytes(b))
    }

    pub fn str(&mut self) -> Result<String, ArtifactError> {
        let len = self.u32()? as usize;
        if len > 1 << 20 {
            return Err(ArtifactError::Corrupt {
                path: self.path.clone(),
                detail: format!("string length {len} unreasonable"),
            });
        }
        let mut b = vec![0u8; len];
        self.r
            .read_exact(&mut b)
            .map_err(|_| truncated(&self.path, "string bytes"))?;
        String::from_utf8(b).map_err(|_| ArtifactError::Corrupt {
            path: self.path.clone(),
            detail: "string is not UTF-8".into(),
        })
    }

    pub fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>, ArtifactError> {
        let mut bytes = vec![0u8; n * 4];
        self.r
            .read_exact(&mut bytes)
            .map_err(|_| truncated(&self.path, "f32 payload"))?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn array<T: Scalar>(&mut self) -> Result<(String, Array<T>), ArtifactError> {
        let name = self.str()?;
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(ArtifactError::Corrupt {
                path: self.path.clone(),
                detail: format!("array rank {rank} unreasonable"),
            });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        if numel > 1 << 28 {
            return Err(ArtifactError::Corrupt {
                path: self.path.clone(),
                detail: format!("array of {numel} elements unreasonable"),
            });
        }
        let values = self.f32_vec(numel)?;
        Ok((name, Array::from_f32_slice(&shape, &values)))
    }

    /// Errors if unread bytes remain; catches over-declared payloads.
    pub fn expect_eof(&mut self) -> Result<(), ArtifactError> {
        let mut b = [0u8; 1];
        match self.r.read(&mut b) {
            Ok(0) => Ok(()),
            Ok(_) => Err(ArtifactError::Corrupt {
                path: self.path.clone(),
                detail: "trailing bytes after declared payload".into(),
            }),
            Err(e) => Err(io_err(&self.path, e)),
        }
    }
}

/// FNV-1a over a file's bytes; used for manifest digests and golden hashes.
pub fn file_digest(path: &Path) -> Result<u64, ArtifactError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(bytes_digest(&bytes))
}

pub fn bytes_digest(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF29CE484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001B3);
    }
    h
}

/// Digest of an array's exact f32 bit patterns.
pub fn array_digest<T: Scalar>(a: &Array<T>) -> u64 {
    let mut h: u64 = 0xCBF29CE484222325;
    for &v in a.data() {
        for b in v.to_f32().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001B3);
        }
    }
    h
}

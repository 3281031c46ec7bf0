//! Versioned binary checkpoints.
//!
//! Layout (little endian):
//!
//! ```text
//! magic "ATRCKPT\0" | version u32 | blob count u32
//! per blob: name (u32 len + utf8) | arch (u32 count + u32s)
//!           | params (u64 count + f64s) | adam flag u8
//!           [ step u64 | lr, beta1, beta2, eps f64 | m f64s | v f64s ]
//! trailer (u64 len + bytes) | sha256 of everything before it
//! ```

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::AdamState;

pub const MAGIC: &[u8; 8] = b"ATRCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated or corrupted: {0}")]
    Corrupt(String),
    #[error("checksum mismatch")]
    Checksum,
    #[error("missing blob `{0}`")]
    MissingBlob(String),
    #[error("architecture mismatch for `{name}`: file has {found:?}, expected {expected:?}")]
    ArchMismatch { name: String, found: Vec<u32>, expected: Vec<u32> },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub name: String,
    pub arch: Vec<u32>,
    pub params: Vec<f64>,
    pub adam: Option<AdamState>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub blobs: Vec<Blob>,
    /// Free-form payload stored after the parameter blobs.
    pub trailer: Vec<u8>,
}

impl Checkpoint {
    pub fn blob(&self, name: &str, expected_arch: &[u32]) -> Result<&Blob, CheckpointError> {
        let b = self.blobs.iter().find(|b| b.name == name).ok_or_else(|| CheckpointError::MissingBlob(name.into()))?;
        if b.arch != expected_arch {
            return Err(CheckpointError::ArchMismatch {
                name: name.into(),
                found: b.arch.clone(),
                expected: expected_arch.to_vec(),
            });
        }
        Ok(b)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.blobs.len() as u32).to_le_bytes());
        let f64s = |out: &mut Vec<u8>, v: &[f64]| v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        for b in &self.blobs {
            out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
            out.extend_from_slice(b.name.as_bytes());
            out.extend_from_slice(&(b.arch.len() as u32).to_le_bytes());
            b.arch.iter().for_each(|a| out.extend_from_slice(&a.to_le_bytes()));
            out.extend_from_slice(&(b.params.len() as u64).to_le_bytes());
            f64s(&mut out, &b.params);
            match &b.adam {
                None => out.push(0),
                Some(a) => {
                    out.push(1);
                    out.extend_from_slice(&a.step.to_le_bytes());
                    f64s(&mut out, &[a.lr, a.beta1, a.beta2, a.eps]);
                    f64s(&mut out, &a.m);
                    f64s(&mut out, &a.v);
                }
            }
        }
        out.extend_from_slice(&(self.trailer.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.trailer);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut r = Reader { buf: bytes, pos: 8 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        if bytes.len() < 32 + 8 {
            return Err(CheckpointError::Corrupt("file too short".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(CheckpointError::Checksum);
        }
        r.buf = body;
        let n = r.u32()? as usize;
        let mut blobs = Vec::with_capacity(n.min(64));
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| CheckpointError::Corrupt("blob name is not utf-8".into()))?;
            let arch_len = r.u32()? as usize;
            let arch = (0..arch_len).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
            let len = r.u64()? as usize;
            let params = r.f64s(len)?;
            let adam = match r.take(1)?[0] {
                0 => None,
                1 => {
                    let step = r.u64()?;
                    let h = r.f64s(4)?;
                    let m = r.f64s(len)?;
                    let v = r.f64s(len)?;
                    Some(AdamState { m, v, step, lr: h[0], beta1: h[1], beta2: h[2], eps: h[3] })
                }
                f => return Err(CheckpointError::Corrupt(format!("bad optimizer flag {f}"))),
            };
            blobs.push(Blob { name, arch, params, adam });
        }
        let tlen = r.u64()? as usize;
        let trailer = r.take(tlen)?.to_vec();
        if r.pos != body.len() {
            return Err(CheckpointError::Corrupt("trailing bytes".into()));
        }
        Ok(Self { blobs, trailer })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CheckpointError::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| CheckpointError::Corrupt("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

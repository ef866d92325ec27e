//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "UDNCKPT\0"
//! version   u32
//! meta_len  u32, then meta_len bytes of UTF-8 (free-form key = value text)
//! count     u32
//! count × { name_len u32, name bytes, ndim u32, ndim × u64 dims, offset u64 }
//! payload   f32 arrays in manifest order; `offset` is relative to payload start
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"UDNCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

/// Named tensors plus a metadata block.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub metadata: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn manifest(&self) -> Vec<ManifestEntry> {
        let mut offset = 0u64;
        self.tensors
            .iter()
            .map(|(name, t)| {
                let e = ManifestEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 4 * t.numel() as u64;
                e
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        out.extend_from_slice(self.metadata.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for entry in self.manifest() {
            out.extend_from_slice(&(entry.name.len() as u32).to_le_bytes());
            out.extend_from_slice(entry.name.as_bytes());
            out.extend_from_slice(&(entry.shape.len() as u32).to_le_bytes());
            for &d in &entry.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&entry.offset.to_le_bytes());
        }
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let metadata = String::from_utf8(r.take(meta_len)?.to_vec())
            .map_err(|_| Error::Format("metadata is not UTF-8".into()))?;
        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let offset = r.u64()?;
            manifest.push(ManifestEntry {
                name,
                shape,
                offset,
            });
        }
        let payload = &bytes[r.pos..];
        let mut tensors = Vec::with_capacity(count);
        for e in manifest {
            let numel: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 4 * numel;
            if end > payload.len() {
                return Err(Error::Format(format!("tensor {} extends past payload", e.name)));
            }
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((e.name, Tensor::new(e.shape, data)?));
        }
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::Path {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = fs::File::open(path).map_err(|e| Error::Path {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let mut buf = Vec::new();
        f.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn header_layout() {
        let ck = Checkpoint {
            metadata: "a = 1\n".into(),
            tensors: vec![
                ("w".into(), Tensor::new(vec![2], vec![1.0, -2.0]).unwrap()),
                ("b".into(), Tensor::new(vec![1, 1], vec![0.5]).unwrap()),
            ],
        };
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), VERSION);
        let m = ck.manifest();
        assert_eq!(m[1].offset, 8);
        // payload is the last 12 bytes: 1.0, -2.0, 0.5
        let tail = &bytes[bytes.len() - 12..];
        assert_eq!(&tail[..4], &1.0f32.to_le_bytes());
        assert_eq!(&tail[8..], &0.5f32.to_le_bytes());
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let ck = Checkpoint {
            metadata: String::new(),
            tensors: vec![("w".into(), Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap())],
        };
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn roundtrip(shapes in prop::collection::vec(prop::collection::vec(1usize..4, 0..3), 0..4),
                     meta in "[a-z =\n]{0,20}") {
            let tensors: Vec<(String, Tensor)> = shapes.iter().enumerate().map(|(i, s)| {
                let n: usize = s.iter().product();
                let data = (0..n).map(|k| k as f32 * 0.25 - i as f32).collect();
                (format!("t{i}"), Tensor::new(s.clone(), data).unwrap())
            }).collect();
            let ck = Checkpoint { metadata: meta, tensors };
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            prop_assert_eq!(back, ck);
        }
    }
}

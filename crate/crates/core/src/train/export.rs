//! Binary embedding index.
//!
//! Header: the 8-byte magic `DROPEMB1`, `u32` width `C`, `u32` part count
//! `K`, `u64` row count. Each row: `u64` identity, `u32` camera,
//! `ceil(K / 8)` visibility bytes (part `k` is bit `k % 8` of byte `k / 8`),
//! then `(2 + K) * C` `f32` values: global, foreground, parts `0..K`.
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{DropError, Result};
use crate::retrieval::{EmbeddingSet, RetrievalRecord};

pub const EXPORT_MAGIC: &[u8; 8] = b"DROPEMB1";
const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    pub dim: usize,
    pub num_parts: usize,
    pub records: Vec<RetrievalRecord>,
}

impl EmbeddingIndex {
    pub fn new(dim: usize, num_parts: usize) -> Self {
        Self {
            dim,
            num_parts,
            records: Vec::new(),
        }
    }

    pub fn from_records(records: Vec<RetrievalRecord>) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| DropError::Dimension("cannot infer widths from an empty record list".into()))?;
        let mut idx = Self::new(first.emb.dim(), first.emb.num_parts());
        idx.extend(records)?;
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Floats per row.
    pub fn row_floats(&self) -> usize {
        (2 + self.num_parts) * self.dim
    }

    fn check(&self, r: &RetrievalRecord) -> Result<()> {
        let e = &r.emb;
        let ok = e.global.len() == self.dim
            && e.foreground.len() == self.dim
            && e.parts.len() == self.num_parts
            && e.visibility.len() == self.num_parts
            && e.parts.iter().all(|p| p.len() == self.dim);
        if ok {
            Ok(())
        } else {
            Err(DropError::Dimension(format!(
                "record does not match index widths C={} K={}",
                self.dim, self.num_parts
            )))
        }
    }

    pub fn extend(&mut self, records: impl IntoIterator<Item = RetrievalRecord>) -> Result<()> {
        for r in records {
            self.check(&r)?;
            self.records.push(r);
        }
        Ok(())
    }

    /// Appends another index with identical widths.
    pub fn append(&mut self, other: &EmbeddingIndex) -> Result<()> {
        if other.dim != self.dim || other.num_parts != self.num_parts {
            return Err(DropError::Dimension(format!(
                "cannot append C={} K={} to C={} K={}",
                other.dim, other.num_parts, self.dim, self.num_parts
            )));
        }
        self.records.extend(other.records.iter().cloned());
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let vis_bytes = self.num_parts.div_ceil(8);
        let row = 12 + vis_bytes + 4 * self.row_floats();
        let mut out = Vec::with_capacity(HEADER_LEN + row * self.len());
        out.extend_from_slice(EXPORT_MAGIC);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.num_parts as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.identity as u64).to_le_bytes());
            out.extend_from_slice(&r.camera.to_le_bytes());
            let mut bits = vec![0u8; vis_bytes];
            for (k, v) in r.emb.visibility.iter().enumerate() {
                if *v {
                    bits[k / 8] |= 1 << (k % 8);
                }
            }
            out.extend_from_slice(&bits);
            let vectors = std::iter::once(&r.emb.global)
                .chain(std::iter::once(&r.emb.foreground))
                .chain(r.emb.parts.iter());
            for v in vectors {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..8] != EXPORT_MAGIC {
            return Err(DropError::Format("not an embedding index".into()));
        }
        let u32_at = |p: usize| u32::from_le_bytes(bytes[p..p + 4].try_into().expect("4 bytes"));
        let u64_at = |p: usize| u64::from_le_bytes(bytes[p..p + 8].try_into().expect("8 bytes"));
        let dim = u32_at(8) as usize;
        let k = u32_at(12) as usize;
        let count = u64_at(16) as usize;
        let vis_bytes = k.div_ceil(8);
        let floats = (2 + k) * dim;
        let row = 12 + vis_bytes + 4 * floats;
        if bytes.len() != HEADER_LEN + row * count {
            return Err(DropError::Format(format!(
                "index length {} does not match {count} rows of {row} bytes",
                bytes.len()
            )));
        }
        let mut records = Vec::with_capacity(count);
        for i in 0..count {
            let p = HEADER_LEN + i * row;
            let identity = u64_at(p) as usize;
            let camera = u32_at(p + 8);
            let bits = &bytes[p + 12..p + 12 + vis_bytes];
            let visibility = (0..k).map(|j| bits[j / 8] & (1 << (j % 8)) != 0).collect();
            let data: Vec<f32> = bytes[p + 12 + vis_bytes..p + row]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let mut vecs = data.chunks_exact(dim.max(1)).map(|c| c.to_vec());
            let (global, foreground) = if dim == 0 {
                (Vec::new(), Vec::new())
            } else {
                (vecs.next().unwrap_or_default(), vecs.next().unwrap_or_default())
            };
            let parts = if dim == 0 { vec![Vec::new(); k] } else { vecs.collect() };
            records.push(RetrievalRecord {
                emb: EmbeddingSet {
                    global,
                    foreground,
                    parts,
                    visibility,
                },
                identity,
                camera,
            });
        }
        Ok(Self {
            dim,
            num_parts: k,
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(seed: f32, k: usize, c: usize, id: usize) -> RetrievalRecord {
        RetrievalRecord {
            emb: EmbeddingSet {
                global: (0..c).map(|i| seed + i as f32).collect(),
                foreground: (0..c).map(|i| -seed * i as f32).collect(),
                parts: (0..k).map(|p| (0..c).map(|i| seed * p as f32 + 0.5 * i as f32).collect()).collect(),
                visibility: (0..k).map(|p| (p + id) % 3 != 0).collect(),
            },
            identity: id,
            camera: (id % 2) as u32,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let idx = EmbeddingIndex::from_records((0..5).map(|i| record(i as f32 * 0.37, 8, 6, i)).collect()).unwrap();
        let back = EmbeddingIndex::from_bytes(&idx.to_bytes()).unwrap();
        assert_eq!(back, idx);
    }

    #[test]
    fn row_payload_size() {
        let idx = EmbeddingIndex::from_records(vec![record(1.0, 8, 64, 0)]).unwrap();
        assert_eq!(idx.row_floats(), 640);
        assert_eq!(idx.to_bytes().len(), HEADER_LEN + 12 + 1 + 640 * 4);
    }

    #[test]
    fn append_sums_counts_and_checks_widths() {
        let mut a = EmbeddingIndex::from_records(vec![record(1.0, 8, 4, 0), record(2.0, 8, 4, 1)]).unwrap();
        let b = a.clone();
        a.append(&b).unwrap();
        assert_eq!(a.len(), 4);
        let back = EmbeddingIndex::from_bytes(&a.to_bytes()).unwrap();
        assert_eq!(back.len(), 4);
        let other = EmbeddingIndex::from_records(vec![record(1.0, 5, 4, 0)]).unwrap();
        assert!(a.append(&other).is_err());
        assert!(a.extend(vec![record(1.0, 8, 3, 0)]).is_err());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = EmbeddingIndex::from_records(vec![record(1.0, 2, 2, 0)]).unwrap().to_bytes();
        assert!(EmbeddingIndex::from_bytes(&bytes[..bytes.len() - 2]).is_err());
    }
}

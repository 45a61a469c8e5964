//! Versioned checkpoint container.
//!
//! Layout: the 8-byte magic `DROPCKPT`, a little-endian `u32` version, a
//! little-endian `u64` header length, the JSON header, then every tensor's
//! `f32` little-endian data back to back in header order.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{DropError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DROPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Param,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub role: TensorRole,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub adam_step: u64,
    pub num_identities: usize,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    role: TensorRole,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    epoch: usize,
    rng: ChaCha8Rng,
    adam_step: u64,
    num_identities: usize,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn tensor(&self, role: TensorRole, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.role == role && t.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            epoch: self.epoch,
            rng: self.rng.clone(),
            adam_step: self.adam_step,
            num_identities: self.num_identities,
            tensors: self
                .tensors
                .iter()
                .map(|t| TensorEntry {
                    name: t.name.clone(),
                    role: t.role,
                    shape: t.shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let payload: usize = self.tensors.iter().map(|t| t.data.len() * 4).sum();
        let mut out = Vec::with_capacity(20 + json.len() + payload);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            if t.data.len() != t.shape.iter().product::<usize>() {
                return Err(DropError::Internal(format!("tensor {} data does not match its shape", t.name)));
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(DropError::Format("not a checkpoint".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(DropError::Format(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(20..20 + hlen)
            .ok_or_else(|| DropError::Format("truncated checkpoint header".into()))?;
        let header: Header = serde_json::from_slice(body)?;
        let mut pos = 20 + hlen;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let raw = bytes
                .get(pos..pos + 4 * n)
                .ok_or_else(|| DropError::Format(format!("truncated data for {}", e.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            pos += 4 * n;
            tensors.push(NamedTensor {
                name: e.name,
                role: e.role,
                shape: e.shape,
                data,
            });
        }
        if pos != bytes.len() {
            return Err(DropError::Format("trailing bytes after checkpoint data".into()));
        }
        Ok(Self {
            config: header.config,
            epoch: header.epoch,
            rng: header.rng,
            adam_step: header.adam_step,
            num_identities: header.num_identities,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        rng.next_u64();
        Checkpoint {
            config: RunConfig::default(),
            epoch: 2,
            rng,
            adam_step: 70,
            num_identities: 20,
            tensors: vec![
                NamedTensor {
                    name: "a.weight".into(),
                    role: TensorRole::Param,
                    shape: vec![2, 3],
                    data: vec![0.1, -2.0, f32::MIN_POSITIVE, 4.0, 5.5, -0.0],
                },
                NamedTensor {
                    name: "a.running_mean".into(),
                    role: TensorRole::Buffer,
                    shape: vec![3],
                    data: vec![1.0, 2.0, 3.0],
                },
            ],
        }
    }

    #[test]
    fn bytes_round_trip_bitwise() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_bad_input() {
        let mut bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}

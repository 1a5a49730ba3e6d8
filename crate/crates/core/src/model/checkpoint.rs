//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "LEAFCKPT" | version u32 | config digest u64 | tensor count u32
//! per tensor: name length u32 | name (UTF-8) | dtype u8 | rank u32 | dims u64 × rank | payload
//! metadata length u64 | metadata (JSON)
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::NetworkConfig;
use super::network::{Network, TransferReport};
use crate::tensor::{DType, Scalar, Tensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"LEAFCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub iteration: usize,
    pub seed: u64,
    pub dataset: String,
    pub num_classes: usize,
    pub network: NetworkConfig,
    #[serde(default)]
    pub class_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl TensorRecord {
    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn from_tensor<T: Scalar>(name: &str, t: &Tensor<T>) -> Self {
        let data = match T::DTYPE {
            DType::F32 => TensorData::F32(t.data().iter().map(|v| v.as_f64() as f32).collect()),
            DType::F64 => TensorData::F64(t.data().iter().map(|v| v.as_f64()).collect()),
        };
        TensorRecord {
            name: name.to_string(),
            dims: t.shape().to_vec(),
            data,
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        let values: Vec<T> = match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| T::from_f64(x as f64)).collect(),
            TensorData::F64(v) => v.iter().map(|&x| T::from_f64(x)).collect(),
        };
        Tensor::from_vec(&self.dims, values)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub digest: u64,
    pub tensors: Vec<TensorRecord>,
    pub meta: CheckpointMeta,
}

/// Whether a full restore insists on a matching config digest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DigestCheck {
    Strict,
    Lenient,
}

impl Checkpoint {
    pub fn from_network<T: Scalar>(network: &Network<T>, meta: CheckpointMeta) -> Self {
        Checkpoint {
            version: FORMAT_VERSION,
            digest: network.digest(),
            tensors: network
                .params()
                .iter()
                .map(|p| TensorRecord::from_tensor(&p.name, &p.value))
                .collect(),
            meta,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.iter().find(|t| t.name == name)
    }

    fn named_tensors<T: Scalar>(&self) -> Result<Vec<(String, Tensor<T>)>> {
        self.tensors
            .iter()
            .map(|r| Ok((r.name.clone(), r.to_tensor()?)))
            .collect()
    }

    /// Replaces every network parameter. Validation happens before any
    /// parameter is written.
    pub fn restore_into<T: Scalar>(&self, network: &mut Network<T>, check: DigestCheck) -> Result<()> {
        if check == DigestCheck::Strict && self.digest != network.digest() {
            return Err(Error::CheckpointDigest {
                found: self.digest,
                expected: network.digest(),
            });
        }
        let mut staged = Vec::with_capacity(network.params().len());
        for p in network.params() {
            let record = self
                .tensor(&p.name)
                .ok_or_else(|| Error::CheckpointCorrupt(format!("tensor '{}' is missing", p.name)))?;
            if record.dims != p.value.shape() {
                return Err(Error::CheckpointCorrupt(format!(
                    "tensor '{}' has shape {:?}, network expects {:?}",
                    p.name,
                    record.dims,
                    p.value.shape()
                )));
            }
            staged.push(record.to_tensor::<T>()?);
        }
        for (p, t) in network.params_mut().iter_mut().zip(staged) {
            p.value = t;
            p.velocity.data_mut().fill(T::zero());
            p.grad.data_mut().fill(T::zero());
        }
        network.mark_initialized();
        Ok(())
    }

    /// Builds a network from the stored configuration and restores it.
    pub fn to_network<T: Scalar>(&self) -> Result<Network<T>> {
        let mut net = Network::build(&self.meta.network, self.meta.num_classes)?;
        self.restore_into(&mut net, DigestCheck::Strict)?;
        Ok(net)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.digest.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.dtype().tag());
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for &d in &t.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(Error::CheckpointCorrupt("bad magic".into()));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let digest = r.u64("digest")?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| Error::CheckpointCorrupt("tensor name is not UTF-8".into()))?
                .to_string();
            let tag = r.take(1, "dtype")?[0];
            let dtype = DType::from_tag(tag)
                .ok_or_else(|| Error::CheckpointCorrupt(format!("tensor '{name}' has unknown dtype tag {tag}")))?;
            let rank = r.u32("rank")? as usize;
            let dims = (0..rank)
                .map(|_| r.u64("dims").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::CheckpointCorrupt(format!("tensor '{name}' dims overflow")))?;
            let data = match dtype {
                DType::F32 => TensorData::F32(
                    r.take(len.saturating_mul(4), "payload")?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                DType::F64 => TensorData::F64(
                    r.take(len.saturating_mul(8), "payload")?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
            };
            tensors.push(TensorRecord { name, dims, data });
        }
        let meta_len = r.u64("metadata length")? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)
            .map_err(|e| Error::CheckpointCorrupt(format!("metadata: {e}")))?;
        if r.pos != bytes.len() {
            return Err(Error::CheckpointCorrupt(format!(
                "{} trailing bytes after metadata",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            version,
            digest,
            tensors,
            meta,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::CheckpointTruncated(format!(
                "{what} needs {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn save_checkpoint<T: Scalar>(network: &Network<T>, meta: &CheckpointMeta, path: &Path) -> Result<Checkpoint> {
    let ckpt = Checkpoint::from_network(network, meta.clone());
    write_checkpoint(&ckpt, path)?;
    Ok(ckpt)
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

/// Restores every non-classifier tensor from `checkpoint` and re-initializes
/// the classifier from `seed`; the classifier width may differ.
pub fn transfer_load<T: Scalar>(checkpoint: &Checkpoint, network: &mut Network<T>, seed: u64) -> Result<TransferReport> {
    let named = checkpoint.named_tensors::<T>()?;
    network.transfer_from(&named, seed)
}

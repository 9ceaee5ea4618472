use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::DEVICE;
use crate::error::{ensure, Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"GLYPHDIF";

#[derive(Debug, Clone, PartialEq)]
pub enum BlobData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorBlob {
    pub shape: Vec<usize>,
    pub data: BlobData,
}

impl TensorBlob {
    pub fn dtype(&self) -> candle_core::DType {
        match self.data {
            BlobData::F32(_) => candle_core::DType::F32,
            BlobData::F64(_) => candle_core::DType::F64,
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let shape = t.dims().to_vec();
        let flat = t.flatten_all()?;
        let data = match t.dtype() {
            DType::F64 => BlobData::F64(flat.to_vec1()?),
            _ => BlobData::F32(flat.to_dtype(DType::F32)?.to_vec1()?),
        };
        Ok(Self { shape, data })
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        let t = match &self.data {
            BlobData::F32(v) => Tensor::from_vec(v.clone(), self.shape.as_slice(), &DEVICE)?,
            BlobData::F64(v) => Tensor::from_vec(v.clone(), self.shape.as_slice(), &DEVICE)?,
        };
        Ok(t)
    }

    fn dtype_tag(&self) -> &'static str {
        match self.data {
            BlobData::F32(_) => "f32",
            BlobData::F64(_) => "f64",
        }
    }

    fn byte_len(&self) -> usize {
        match &self.data {
            BlobData::F32(v) => v.len() * 4,
            BlobData::F64(v) => v.len() * 8,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<IndexEntry>,
}

/// Binary container: magic, little-endian header length, JSON header
/// (version, kind, free-form metadata, tensor index), then raw tensor bytes
/// in name order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, TensorBlob>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let mut index = Vec::with_capacity(self.tensors.len());
        for (name, blob) in &self.tensors {
            let len = blob.byte_len();
            index.push(IndexEntry {
                name: name.clone(),
                dtype: blob.dtype_tag().to_string(),
                shape: blob.shape.clone(),
                offset,
                len,
            });
            offset += len;
        }
        let header = serde_json::to_vec(&Header {
            version: CHECKPOINT_VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: index,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for blob in self.tensors.values() {
            match &blob.data {
                BlobData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                BlobData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        ensure!(
            bytes.len() >= 16 && &bytes[..8] == MAGIC,
            State,
            "not a checkpoint file"
        );
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        ensure!(bytes.len() >= 16 + hlen, State, "truncated checkpoint header");
        let header: Header = serde_json::from_slice(&bytes[16..16 + hlen])?;
        ensure!(
            header.version == CHECKPOINT_VERSION,
            State,
            "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
            header.version
        );
        let body = &bytes[16 + hlen..];
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            ensure!(
                e.offset + e.len <= body.len(),
                State,
                "tensor {} runs past end of file",
                e.name
            );
            let raw = &body[e.offset..e.offset + e.len];
            let count: usize = e.shape.iter().product();
            let data = match e.dtype.as_str() {
                "f32" => {
                    ensure!(raw.len() == count * 4, State, "bad length for {}", e.name);
                    BlobData::F32(
                        raw.chunks_exact(4)
                            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                            .collect(),
                    )
                }
                "f64" => {
                    ensure!(raw.len() == count * 8, State, "bad length for {}", e.name);
                    BlobData::F64(
                        raw.chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                            .collect(),
                    )
                }
                other => return Err(Error::state(format!("unknown dtype {other}"))),
            };
            tensors.insert(e.name, TensorBlob { shape: e.shape, data });
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and checks the checkpoint kind.
    pub fn load_kind(path: &Path, kind: &str) -> Result<Self> {
        let ckpt = Self::load(path)?;
        ensure!(
            ckpt.kind == kind,
            State,
            "{} holds a {} checkpoint, expected {kind}",
            path.display(),
            ckpt.kind
        );
        Ok(ckpt)
    }

    pub fn meta_field<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| Error::state(format!("checkpoint metadata lacks {key}")))?;
        Ok(serde_json::from_value(v.clone())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip_exactly() {
        let mut tensors = BTreeMap::new();
        tensors.insert(
            "b".to_string(),
            TensorBlob {
                shape: vec![2, 2],
                data: BlobData::F32(vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE]),
            },
        );
        tensors.insert(
            "a".to_string(),
            TensorBlob {
                shape: vec![3],
                data: BlobData::F64(vec![0.1, 0.2, 0.3]),
            },
        );
        let ckpt = Checkpoint {
            kind: "test".into(),
            meta: serde_json::json!({"z": 1, "a": [1, 2]}),
            tensors,
        };
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn garbage_is_a_state_error() {
        assert!(matches!(
            Checkpoint::from_bytes(b"hello world, not a checkpoint"),
            Err(Error::State(_))
        ));
    }
}

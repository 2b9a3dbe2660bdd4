//! Checkpoint container: a flat map of parameter path -> f32 tensor plus a
//! JSON metadata record, in one file. Round-trips bitwise.
//!
//! Layout: magic "RTCK" | u32 version | u64 header length | header JSON |
//! little-endian f32 data. The header carries the metadata and, per tensor,
//! its shape and element offset into the data block.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const MAGIC: &[u8; 4] = b"RTCK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct CheckpointMeta {
    pub toolkit_version: String,
    /// Band names of the backbone input, in order. Channel surgery keys off
    /// these; loading a mismatched-band checkpoint without them is an error.
    pub bands: Option<Vec<String>>,
    pub num_frames: Option<usize>,
    /// Canonical serialized run config, when saved from a training run.
    pub config_echo: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct TensorIndex {
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    tensors: BTreeMap<String, TensorIndex>,
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, ArrayD<f32>>,
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta, tensors: BTreeMap<String, ArrayD<f32>>) -> Self {
        Self { meta, tensors }
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut index = BTreeMap::new();
        let mut offset = 0u64;
        for (p, t) in &self.tensors {
            let len = t.len() as u64;
            index.insert(
                p.clone(),
                TensorIndex {
                    shape: t.shape().to_vec(),
                    offset,
                    len,
                },
            );
            offset += len;
        }
        let header = Header {
            meta: self.meta.clone(),
            tensors: index,
        };
        let header_json =
            serde_json::to_vec(&header).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;

        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(MAGIC)?;
        f.write_all(&VERSION.to_le_bytes())?;
        f.write_all(&(header_json.len() as u64).to_le_bytes())?;
        f.write_all(&header_json)?;
        for t in self.tensors.values() {
            let data = t.as_slice().expect("standard layout");
            let mut bytes = Vec::with_capacity(data.len() * 4);
            for v in data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            f.write_all(&bytes)?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut v4 = [0u8; 4];
        f.read_exact(&mut v4)?;
        let version = u32::from_le_bytes(v4);
        if version != VERSION {
            return Err(CheckpointError::BadVersion(version));
        }
        let mut l8 = [0u8; 8];
        f.read_exact(&mut l8)?;
        let header_len = u64::from_le_bytes(l8) as usize;
        let mut header_json = vec![0u8; header_len];
        f.read_exact(&mut header_json)?;
        let header: Header = serde_json::from_slice(&header_json)
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;

        let mut data = Vec::new();
        f.read_to_end(&mut data)?;
        let total: u64 = header.tensors.values().map(|t| t.len).sum();
        if data.len() != (total as usize) * 4 {
            return Err(CheckpointError::Corrupt(format!(
                "data block is {} bytes, expected {}",
                data.len(),
                total * 4
            )));
        }
        let mut tensors = BTreeMap::new();
        for (p, idx) in header.tensors {
            let n = idx.len as usize;
            let start = idx.offset as usize * 4;
            let mut v = Vec::with_capacity(n);
            for i in 0..n {
                let b = &data[start + i * 4..start + i * 4 + 4];
                v.push(f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
            }
            let expected: usize = idx.shape.iter().product();
            if expected != n {
                return Err(CheckpointError::Corrupt(format!(
                    "tensor {p} shape {:?} vs {n} elements",
                    idx.shape
                )));
            }
            let arr = ArrayD::from_shape_vec(IxDyn(&idx.shape), v)
                .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            tensors.insert(p, arr);
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }
}

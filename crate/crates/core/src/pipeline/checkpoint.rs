//! Checkpoint file layout, integers little-endian:
//!
//! | bytes | content                                              |
//! |-------|------------------------------------------------------|
//! | 4     | magic `PVCK`                                         |
//! | 4     | format version (u32)                                 |
//! | 8     | header length H (u64)                                |
//! | H     | UTF-8 JSON header: version, step, config, tensors    |
//! | …     | parameters, then Adam first and second moments, each |
//! |       | as row-major f64 in header tensor order              |

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::optim::AdamW;
use crate::autograd::Mat;
use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"PVCK";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config: TrainConfig,
    pub params: ParamStore,
    pub optimizer: AdamW,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    step: u64,
    adam_t: u64,
    config: TrainConfig,
    tensors: Vec<(String, [usize; 2])>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors = self.params.iter().map(|(n, v)| (n.clone(), [v.nrows(), v.ncols()])).collect();
        let header = Header { version: CHECKPOINT_VERSION, step: self.step, adam_t: self.optimizer.t, config: self.config.clone(), tensors };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 24 * self.params.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for store in [&self.params, &self.optimizer.m, &self.optimizer.v] {
            for (name, _) in self.params.iter() {
                let v = store.get(name).expect("optimizer state mirrors parameters");
                for x in v.iter() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(&format!("header: {e}")))?;
        header.config.validate()?;
        let mut cursor = 16 + hlen;
        let mut read_store = || -> Result<ParamStore> {
            let mut store = ParamStore::new();
            for (name, [r, c]) in &header.tensors {
                let n = r * c;
                let raw = bytes.get(cursor..cursor + 8 * n).ok_or_else(|| bad("truncated tensor data"))?;
                cursor += 8 * n;
                let vals = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
                store.insert(name.clone(), Mat::from_shape_vec((*r, *c), vals).expect("shape matches length"));
            }
            Ok(store)
        };
        let params = read_store()?;
        let m = read_store()?;
        let v = read_store()?;
        if cursor != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        let cfg = &header.config;
        let optimizer = AdamW { lr: cfg.lr, beta1: cfg.beta1, beta2: cfg.beta2, weight_decay: cfg.weight_decay, t: header.adam_t, m, v };
        Ok(Self { step: header.step, config: header.config, params, optimizer })
    }

    /// Writes through a temporary file so an interrupted save leaves the
    /// previous checkpoint intact.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).and_then(|_| f.sync_all()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

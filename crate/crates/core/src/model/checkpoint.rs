use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelError, NetworkConfig, ParamSet};
use crate::format::{write_atomic, ContainerReader, ContainerWriter};
use crate::tensor::Tensor;
use crate::trainer::AdamState;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DRAPECKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointMode {
    Pose,
    Resize,
}

impl fmt::Display for CheckpointMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Pose => "pose",
            Self::Resize => "resize",
        })
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    mode: CheckpointMode,
    garment_hash: String,
    body_hash: String,
    network: NetworkConfig,
    tensors: Vec<TensorEntry>,
    /// Adam step count; moment blocks follow the parameters when present.
    optimizer_step: Option<u64>,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Deserialize)]
struct VersionOnly {
    version: u32,
}

/// Parameters plus everything needed to validate and resume them. All
/// tensors are stored as f64 so round trips are exact.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub mode: CheckpointMode,
    pub garment_hash: String,
    pub body_hash: String,
    pub network: NetworkConfig,
    pub params: ParamSet,
    pub optimizer: Option<AdamState>,
    /// Mode-specific extras (for example resizer sampling ranges).
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            version: CHECKPOINT_VERSION,
            mode: self.mode,
            garment_hash: self.garment_hash.clone(),
            body_hash: self.body_hash.clone(),
            network: self.network.clone(),
            tensors: self
                .params
                .iter()
                .map(|p| TensorEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                })
                .collect(),
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            meta: self.meta.clone(),
        };
        let mut w = ContainerWriter::new(CHECKPOINT_MAGIC, &header);
        for p in self.params.iter() {
            w.f64s(p.value.data().iter().copied());
        }
        if let Some(o) = &self.optimizer {
            for m in o.m.iter().chain(&o.v) {
                w.f64s(m.iter().copied());
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let (raw, mut r): (serde_json::Value, _) = ContainerReader::open(bytes, CHECKPOINT_MAGIC)?;
        let v: VersionOnly = serde_json::from_value(raw.clone())
            .map_err(|e| ModelError::Layout(format!("header: {e}")))?;
        if v.version != CHECKPOINT_VERSION {
            return Err(ModelError::Version {
                found: v.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let h: Header =
            serde_json::from_value(raw).map_err(|e| ModelError::Layout(format!("header: {e}")))?;
        let mut params = ParamSet::default();
        for t in &h.tensors {
            let n = t.shape.iter().product();
            let data = r.f64s(n, &format!("tensor {}", t.name))?;
            params.push(&t.name, Tensor::new(t.shape.clone(), data)?);
        }
        let optimizer = match h.optimizer_step {
            None => None,
            Some(step) => {
                let mut read = |what: &str| -> Result<Vec<Vec<f64>>, ModelError> {
                    h.tensors
                        .iter()
                        .map(|t| {
                            Ok(r.f64s(
                                t.shape.iter().product(),
                                &format!("{what} moment of {}", t.name),
                            )?)
                        })
                        .collect()
                };
                let m = read("first")?;
                let v = read("second")?;
                Some(AdamState { step, m, v })
            }
        };
        r.finish()?;
        Ok(Self {
            mode: h.mode,
            garment_hash: h.garment_hash,
            body_hash: h.body_hash,
            network: h.network,
            params,
            optimizer,
            meta: h.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        write_atomic(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn check_hashes(&self, garment: &str, body: &str, force: bool) -> Result<(), ModelError> {
        for (what, saved, current) in [
            ("garment", &self.garment_hash, garment),
            ("body", &self.body_hash, body),
        ] {
            if saved != current {
                if force {
                    log::warn!("{what} hash mismatch ignored: checkpoint {saved}, current {current}");
                } else {
                    return Err(ModelError::HashMismatch {
                        what,
                        checkpoint: saved.clone(),
                        current: current.to_string(),
                    });
                }
            }
        }
        Ok(())
    }
}

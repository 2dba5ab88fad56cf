//! Checkpoint file layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic "IKRESCKP"
//! 8       4     format version (u32)
//! 12      4     header length H (u32)
//! 16      H     UTF-8 JSON header
//! 16+H    4*N   f32 payload, tensors in header order, row-major
//! ```
//!
//! The header holds `task`, `config`, `normalizer`, `prchk_threshold`,
//! `config_hash` and `tensors: [{name, kind, shape}]`. The payload length
//! must equal the sum of the tensor sizes exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{IKres, IKresConfig, ModelError, NamedTensor, Task, TensorKind};
use crate::tensor::Tensor;
use crate::training::Normalizer;

pub const MAGIC: &[u8; 8] = b"IKRESCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint version {found} not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("non-finite value in tensor {0}")]
    NonFinite(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    pub task: Task,
    pub config: IKresConfig,
    pub normalizer: Normalizer,
    pub prchk_threshold: Option<f64>,
    pub config_hash: Option<String>,
    pub tensors: Vec<NamedTensor<f32>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorHeader {
    name: String,
    kind: TensorKind,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    task: Task,
    config: IKresConfig,
    normalizer: Normalizer,
    prchk_threshold: Option<f64>,
    config_hash: Option<String>,
    tensors: Vec<TensorHeader>,
}

impl ModelCheckpoint {
    pub fn from_model(model: &IKres<f32>, normalizer: Normalizer, prchk_threshold: Option<f64>) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            task: model.task(),
            config: model.config().clone(),
            normalizer,
            prchk_threshold,
            config_hash: None,
            tensors: model.named_tensors(),
        }
    }

    pub fn to_model(&self) -> Result<IKres<f32>, ModelError> {
        let mut m = IKres::new(self.config.clone(), self.task, 0)?;
        m.load_named(&self.tensors)?;
        Ok(m)
    }

    fn check_finite(&self) -> Result<(), CheckpointError> {
        match self.tensors.iter().find(|t| !t.value.is_finite()) {
            Some(t) => Err(CheckpointError::NonFinite(t.name.clone())),
            None => Ok(()),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        self.check_finite()?;
        let header = Header {
            task: self.task,
            config: self.config.clone(),
            normalizer: self.normalizer.clone(),
            prchk_threshold: self.prchk_threshold,
            config_hash: self.config_hash.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| TensorHeader { name: t.name.clone(), kind: t.kind, shape: t.value.shape().to_vec() })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let payload: usize = self.tensors.iter().map(|t| t.value.len()).sum();
        let mut out = Vec::with_capacity(16 + json.len() + 4 * payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            for v in t.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let corrupt = |m: &str| CheckpointError::Corrupt(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic or truncated preamble"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if body.len() < hlen {
            return Err(corrupt("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let mut payload = body[hlen..].chunks_exact(4);
        if payload.remainder().len() != 0 {
            return Err(corrupt("payload is not a whole number of f32 values"));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for th in header.tensors {
            let n: usize = th.shape.iter().product();
            let data: Vec<f32> = payload
                .by_ref()
                .take(n)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if data.len() != n {
                return Err(corrupt("truncated payload"));
            }
            let value = Tensor::new(th.shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            tensors.push(NamedTensor { name: th.name, kind: th.kind, value });
        }
        if payload.next().is_some() {
            return Err(corrupt("trailing bytes after payload"));
        }
        let ck = Self {
            format_version: version,
            task: header.task,
            config: header.config,
            normalizer: header.normalizer,
            prchk_threshold: header.prchk_threshold,
            config_hash: header.config_hash,
            tensors,
        };
        ck.check_finite()?;
        // validates names and shapes against the architecture
        ck.to_model()?;
        Ok(ck)
    }
}

pub fn save_checkpoint(ck: &ModelCheckpoint, path: &Path) -> Result<(), CheckpointError> {
    let bytes = ck.to_bytes()?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint, CheckpointError> {
    ModelCheckpoint::from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::TargetStats;

    fn ck() -> ModelCheckpoint {
        let cfg = IKresConfig { ingest_filters: 2, block_filters: vec![2, 3, 3, 4], kernel: 3, input_len: 40, head_hidden: 4 };
        let m = IKres::<f32>::new(cfg, Task::Qt, 9).unwrap();
        let norm = Normalizer::new(vec![
            TargetStats { name: "qt_ms".into(), mean: 394.0, std: 49.9 },
            TargetStats { name: "hr_bpm".into(), mean: 77.0, std: 20.3 },
        ])
        .unwrap();
        ModelCheckpoint::from_model(&m, norm, None)
    }

    #[test]
    fn byte_identical_roundtrip() {
        let a = ck().to_bytes().unwrap();
        let loaded = ModelCheckpoint::from_bytes(&a).unwrap();
        assert_eq!(loaded, ck());
        assert_eq!(loaded.to_bytes().unwrap(), a);
        assert_eq!(loaded.normalizer.inverse(0, 0.0), 394.0);
    }

    #[test]
    fn truncated_and_version() {
        let a = ck().to_bytes().unwrap();
        for cut in [0, 10, 20, a.len() - 1] {
            assert!(matches!(ModelCheckpoint::from_bytes(&a[..cut]), Err(CheckpointError::Corrupt(_))));
        }
        let mut b = a.clone();
        b[8] = 7;
        assert!(matches!(ModelCheckpoint::from_bytes(&b), Err(CheckpointError::VersionMismatch { found: 7, .. })));
        let mut c = a;
        c.push(0);
        assert!(ModelCheckpoint::from_bytes(&c).is_err());
    }

    #[test]
    fn non_finite_rejected() {
        let mut c = ck();
        c.tensors[0].value.data_mut()[0] = f32::NAN;
        assert!(matches!(c.to_bytes(), Err(CheckpointError::NonFinite(_))));
    }
}

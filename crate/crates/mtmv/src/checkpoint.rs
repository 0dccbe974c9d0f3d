//! Binary checkpoints: model config, parameters, and optimizer state.
//!
//! Layout: 8-byte magic, u32 little-endian JSON header length, the header
//! (version, step, model config, Adam hyperparameters and step count, and
//! per-parameter name/shape), then raw little-endian f64 payloads — every
//! parameter's data in order, then every first moment, then every second
//! moment. Round-trips are bit-exact.

use crate::model::ModelConfig;
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Param;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"MTMVCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("corrupt header: {0}")]
    BadHeader(String),
    #[error("payload truncated: expected {want} bytes after header, found {have}")]
    Truncated { want: usize, have: usize },
    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io { path: path.display().to_string(), source }
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    step: u64,
    model: ModelConfig,
    adam: AdamConfig,
    adam_steps: u64,
    params: Vec<ParamMeta>,
}

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
}

pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

pub struct Checkpoint {
    pub step: u64,
    pub model: ModelConfig,
    pub adam: AdamConfig,
    pub adam_steps: u64,
    pub entries: Vec<CheckpointEntry>,
}

/// Serializes current parameter values and optimizer state. `params` must be
/// the same canonical list the optimizer was built from.
pub fn save(
    path: &Path,
    step: u64,
    model: &ModelConfig,
    params: &[Param],
    adam: &Adam,
) -> Result<(), CheckpointError> {
    let (adam_steps, moments) = adam.state();
    assert_eq!(params.len(), moments.len(), "optimizer/parameter list mismatch");
    let metas: Vec<ParamMeta> = params
        .iter()
        .zip(&moments)
        .map(|(p, (name, m, _))| {
            assert_eq!(p.name(), *name, "optimizer slot order differs from params");
            assert_eq!(p.numel(), m.len());
            ParamMeta { name: p.name().to_string(), shape: p.shape() }
        })
        .collect();
    let header = Header {
        version: VERSION,
        step,
        model: model.clone(),
        adam: adam.config(),
        adam_steps,
        params: metas,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| CheckpointError::BadHeader(e.to_string()))?;

    let numel: usize = params.iter().map(Param::numel).sum();
    let mut bytes = Vec::with_capacity(8 + 4 + header_json.len() + 3 * numel * 8);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    let mut push = |vals: &[f64]| {
        for v in vals {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    };
    for p in params {
        push(&p.data_snapshot());
    }
    for (_, m, _) in &moments {
        push(m);
    }
    for (_, _, v) in &moments {
        push(v);
    }
    std::fs::write(path, &bytes).map_err(|e| io_err(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = 12 + header_len;
    if bytes.len() < body {
        return Err(CheckpointError::BadHeader("header extends past end of file".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[12..body])
        .map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
    if header.version != VERSION {
        return Err(CheckpointError::BadHeader(format!("unsupported version {}", header.version)));
    }
    let numel: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    let want = 3 * numel * 8;
    if bytes.len() - body != want {
        return Err(CheckpointError::Truncated { want, have: bytes.len() - body });
    }
    let mut cursor = body;
    let mut read_vec = |n: usize| -> Vec<f64> {
        let out = bytes[cursor..cursor + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        cursor += 8 * n;
        out
    };
    let mut data = Vec::with_capacity(header.params.len());
    for p in &header.params {
        data.push(read_vec(p.shape.iter().product()));
    }
    let mut ms = Vec::with_capacity(header.params.len());
    for p in &header.params {
        ms.push(read_vec(p.shape.iter().product()));
    }
    let mut vs = Vec::with_capacity(header.params.len());
    for p in &header.params {
        vs.push(read_vec(p.shape.iter().product()));
    }
    let entries = header
        .params
        .into_iter()
        .zip(data)
        .zip(ms.into_iter().zip(vs))
        .map(|((meta, data), (m, v))| CheckpointEntry {
            name: meta.name,
            shape: meta.shape,
            data,
            m,
            v,
        })
        .collect();
    Ok(Checkpoint {
        step: header.step,
        model: header.model,
        adam: header.adam,
        adam_steps: header.adam_steps,
        entries,
    })
}

impl Checkpoint {
    fn check_alignment(&self, params: &[Param]) -> Result<(), CheckpointError> {
        if params.len() != self.entries.len() {
            return Err(CheckpointError::Mismatch(format!(
                "{} parameters, checkpoint has {}",
                params.len(),
                self.entries.len()
            )));
        }
        for (p, e) in params.iter().zip(&self.entries) {
            if p.name() != e.name || p.shape() != e.shape {
                return Err(CheckpointError::Mismatch(format!(
                    "parameter {} {:?} vs checkpoint {} {:?}",
                    p.name(),
                    p.shape(),
                    e.name,
                    e.shape
                )));
            }
        }
        Ok(())
    }

    /// Writes stored values into `params` (canonical order, names and shapes
    /// must match exactly).
    pub fn restore_params(&self, params: &[Param]) -> Result<(), CheckpointError> {
        self.check_alignment(params)?;
        for (p, e) in params.iter().zip(&self.entries) {
            p.set_data(&e.data);
        }
        Ok(())
    }

    /// Restores parameters and optimizer moments.
    pub fn restore(&self, params: &[Param], adam: &mut Adam) -> Result<(), CheckpointError> {
        self.restore_params(params)?;
        let moments: Vec<(String, Vec<f64>, Vec<f64>)> = self
            .entries
            .iter()
            .map(|e| (e.name.clone(), e.m.clone(), e.v.clone()))
            .collect();
        adam.restore(self.adam_steps, &moments);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::tensor::Tensor;
    use tempfile::TempDir;

    fn tiny_model() -> ModelConfig {
        let mut cfg = ModelConfig::new(vec![3, 3], vec![2]);
        cfg.hidden_dim = 4;
        cfg.n_blocks = 2;
        cfg
    }

    fn funky_params() -> Vec<Param> {
        vec![
            Param::new("a", Tensor::new(vec![2, 2], vec![1e-300, -0.0, std::f64::consts::PI, 5e300])),
            Param::new("b", Tensor::new(vec![3], vec![-1.5, f64::MIN_POSITIVE, 42.0])),
        ]
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = TempDir::new().unwrap();
        let params = funky_params();
        let mut adam = Adam::new(params.clone(), AdamConfig::default());
        // Take a real step so the moments are nonzero.
        let mut g = Graph::new();
        let ids: Vec<_> = params.iter().map(|p| g.leaf(p)).collect();
        let sums: Vec<_> = ids.iter().map(|&id| g.sum(id)).collect();
        let total = g.add(sums[0], sums[1]);
        g.backward(total);
        adam.step();

        let path = dir.path().join("ck.bin");
        save(&path, 17, &tiny_model(), &params, &adam).unwrap();
        let ck = load(&path).unwrap();
        assert_eq!(ck.step, 17);
        assert_eq!(ck.adam_steps, 1);
        assert_eq!(ck.model, tiny_model());

        let fresh = funky_params();
        for p in &fresh {
            p.set_data(&vec![0.0; p.numel()]);
        }
        let mut fresh_adam = Adam::new(fresh.clone(), ck.adam);
        ck.restore(&fresh, &mut fresh_adam).unwrap();
        for (orig, new) in params.iter().zip(&fresh) {
            let (a, b) = (orig.data_snapshot(), new.data_snapshot());
            assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let (s1, m1) = adam.state();
        let (s2, m2) = fresh_adam.state();
        assert_eq!(s1, s2);
        for ((_, am, av), (_, bm, bv)) in m1.iter().zip(&m2) {
            assert!(am.iter().zip(*bm).all(|(x, y)| x.to_bits() == y.to_bits()));
            assert!(av.iter().zip(*bv).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"NOTMAGIC0000").unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = TempDir::new().unwrap();
        let params = funky_params();
        let adam = Adam::new(params.clone(), AdamConfig::default());
        let path = dir.path().join("ck.bin");
        save(&path, 0, &tiny_model(), &params, &adam).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::Truncated { .. })));
    }

    #[test]
    fn shape_mismatch_fails_restore() {
        let dir = TempDir::new().unwrap();
        let params = funky_params();
        let adam = Adam::new(params.clone(), AdamConfig::default());
        let path = dir.path().join("ck.bin");
        save(&path, 0, &tiny_model(), &params, &adam).unwrap();
        let ck = load(&path).unwrap();
        let other = vec![
            Param::new("a", Tensor::zeros(vec![2, 2])),
            Param::new("b", Tensor::zeros(vec![4])),
        ];
        assert!(matches!(ck.restore_params(&other), Err(CheckpointError::Mismatch(_))));
        let renamed = vec![
            Param::new("a", Tensor::zeros(vec![2, 2])),
            Param::new("c", Tensor::zeros(vec![3])),
        ];
        assert!(matches!(ck.restore_params(&renamed), Err(CheckpointError::Mismatch(_))));
    }

    #[test]
    fn garbage_header_is_rejected() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("ck.bin");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&10u32.to_le_bytes());
        bytes.extend_from_slice(b"not json!!");
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::BadHeader(_))));
    }
}

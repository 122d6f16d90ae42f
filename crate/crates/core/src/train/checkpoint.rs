//! Checkpoint container:
//!
//! ```text
//! b"LUCFCKPT" | u64 LE header length | JSON header | f64 LE tensor payload
//! ```
//!
//! The header carries the training config, its SHA-256, progress counters,
//! the RNG position, a tensor directory (name, kind, shape, offset) and the
//! SHA-256 of the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{OptimState, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::model::LucfNet;
use crate::tensor::rng::{DetRng, Domain, RngState};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LUCFCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Hex SHA-256 of the config's JSON serialization.
pub fn config_hash(cfg: &TrainConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    hex(&Sha256::digest(json))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    Buffer,
    Velocity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    /// Offset into the payload in f64 elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format: u32,
    config: TrainConfig,
    config_hash: String,
    num_samples: usize,
    iter: u64,
    max_iter: u64,
    /// Position of the sample-order stream of the current epoch.
    rng: RngState,
    payload_sha256: String,
    tensors: Vec<TensorEntry>,
}

/// Everything needed to continue a run bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub num_samples: usize,
    pub iter: u64,
    pub max_iter: u64,
    pub rng: RngState,
    pub params: Vec<(String, Tensor)>,
    pub buffers: Vec<(String, Tensor)>,
    pub velocity: Vec<Vec<f64>>,
}

fn epoch_rng(cfg: &TrainConfig, num_samples: usize, iter: u64) -> RngState {
    let epoch = iter / cfg.steps_per_epoch(num_samples);
    DetRng::new(cfg.seed, Domain::Shuffle, &[epoch]).state()
}

impl Checkpoint {
    pub fn capture(t: &Trainer) -> Self {
        let store = &t.net.store;
        Self {
            config: t.cfg.clone(),
            num_samples: t.num_samples,
            iter: t.optim.iter,
            max_iter: t.optim.max_iter,
            rng: epoch_rng(&t.cfg, t.num_samples, t.optim.iter),
            params: store.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
            buffers: store.buffers().iter().map(|b| (b.name.clone(), b.value.clone())).collect(),
            velocity: t.optim.velocity.clone(),
        }
    }

    /// Rebuilds the model described by the config and loads every tensor.
    pub fn restore(&self) -> Result<Trainer> {
        let mut net = LucfNet::new(&self.config.model, self.config.seed)?;
        self.load_into(&mut net)?;
        let mut optim = OptimState::new(self.config.optim.clone(), &net.store, self.max_iter);
        optim.iter = self.iter;
        optim.velocity = self.velocity.clone();
        Ok(Trainer {
            cfg: self.config.clone(),
            net,
            optim,
            num_samples: self.num_samples,
        })
    }

    /// Copies parameters and buffers into a model built from the same config.
    pub fn load_into(&self, net: &mut LucfNet) -> Result<()> {
        let check = |name: &str, expected: &[usize], found: &Tensor| {
            if expected != found.shape() {
                return Err(Error::CheckpointShape {
                    name: name.to_string(),
                    expected: expected.to_vec(),
                    found: found.shape().to_vec(),
                });
            }
            Ok(())
        };
        if self.params.len() != net.store.params().len()
            || self.buffers.len() != net.store.buffers().len()
        {
            return Err(Error::CorruptCheckpoint(format!(
                "{} params / {} buffers for a model with {} / {}",
                self.params.len(),
                self.buffers.len(),
                net.store.params().len(),
                net.store.buffers().len()
            )));
        }
        for ((name, t), p) in self.params.iter().zip(net.store.params()) {
            check(name, p.value.shape(), t)?;
        }
        for ((name, t), b) in self.buffers.iter().zip(net.store.buffers()) {
            check(name, b.value.shape(), t)?;
        }
        for ((_, t), p) in self.params.iter().zip(net.store.params_mut()) {
            p.value = t.clone();
        }
        for ((_, t), b) in self.buffers.iter().zip(net.store.buffers_mut()) {
            b.value = t.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        let mut offset = 0;
        let mut push = |name: &str, kind, shape: &[usize], data: &[f64]| {
            tensors.push(TensorEntry {
                name: name.to_string(),
                kind,
                shape: shape.to_vec(),
                offset,
            });
            offset += data.len();
            for v in data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (name, t) in &self.params {
            push(name, TensorKind::Param, t.shape(), t.data());
        }
        for (name, t) in &self.buffers {
            push(name, TensorKind::Buffer, t.shape(), t.data());
        }
        for ((name, t), v) in self.params.iter().zip(&self.velocity) {
            push(name, TensorKind::Velocity, t.shape(), v);
        }
        let header = Header {
            format: FORMAT_VERSION,
            config: self.config.clone(),
            config_hash: config_hash(&self.config),
            num_samples: self.num_samples,
            iter: self.iter,
            max_iter: self.max_iter,
            rng: self.rng,
            payload_sha256: hex(&Sha256::digest(&payload)),
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt("missing magic"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes
            .get(16..16usize.saturating_add(len))
            .ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(json)
            .map_err(|e| Error::CorruptCheckpoint(format!("header: {e}")))?;
        if header.format != FORMAT_VERSION {
            return Err(Error::CorruptCheckpoint(format!("format {}", header.format)));
        }
        let computed = config_hash(&header.config);
        if computed != header.config_hash {
            return Err(Error::HashMismatch {
                stored: header.config_hash,
                computed,
            });
        }
        let payload = &bytes[16 + len..];
        let total: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if payload.len() != total * 8 {
            return Err(Error::CorruptCheckpoint(format!(
                "payload has {} bytes, directory needs {}",
                payload.len(),
                total * 8
            )));
        }
        if hex(&Sha256::digest(payload)) != header.payload_sha256 {
            return Err(corrupt("payload checksum mismatch"));
        }
        let mut ckpt = Checkpoint {
            config: header.config,
            num_samples: header.num_samples,
            iter: header.iter,
            max_iter: header.max_iter,
            rng: header.rng,
            params: Vec::new(),
            buffers: Vec::new(),
            velocity: Vec::new(),
        };
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let raw = payload
                .get(e.offset * 8..(e.offset + n) * 8)
                .ok_or_else(|| corrupt("tensor outside payload"))?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            match e.kind {
                TensorKind::Param => ckpt.params.push((e.name.clone(), Tensor::new(&e.shape, data)?)),
                TensorKind::Buffer => ckpt.buffers.push((e.name.clone(), Tensor::new(&e.shape, data)?)),
                TensorKind::Velocity => ckpt.velocity.push(data),
            }
        }
        if ckpt.velocity.len() != ckpt.params.len() {
            return Err(corrupt("velocity count differs from parameter count"));
        }
        if ckpt.num_samples == 0 || ckpt.iter > ckpt.max_iter {
            return Err(corrupt("inconsistent progress counters"));
        }
        if epoch_rng(&ckpt.config, ckpt.num_samples, ckpt.iter) != ckpt.rng {
            return Err(corrupt("rng position does not match the iteration"));
        }
        Ok(ckpt)
    }
}

/// Writes via a temporary file and rename so a crash never leaves a partial file.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, ckpt.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn trainer() -> Trainer {
        let cfg = TrainConfig {
            model: ModelConfig {
                base_width: 2,
                heads: [1, 1, 1, 1],
                input_size: (32, 32),
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        };
        Trainer::new(&cfg, 5).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let ckpt = trainer().checkpoint();
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn truncation_and_tampering_are_distinct_errors() {
        let bytes = trainer().checkpoint().to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::CorruptCheckpoint(_))
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..40]),
            Err(Error::CorruptCheckpoint(_))
        ));
        // Flip the seed inside the header without fixing the hash.
        let text = String::from_utf8_lossy(&bytes[16..]).into_owned();
        let at = 16 + text.find("\"seed\":0").unwrap() + 7;
        let mut bad = bytes.clone();
        bad[at] = b'7';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::HashMismatch { .. })));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut ckpt = trainer().checkpoint();
        ckpt.params[0].1 = Tensor::zeros(&[1]);
        let mut net = LucfNet::new(&ckpt.config.model, 0).unwrap();
        let before = net.store.clone();
        assert!(matches!(
            ckpt.load_into(&mut net),
            Err(Error::CheckpointShape { .. })
        ));
        assert_eq!(net.store, before);
    }
}

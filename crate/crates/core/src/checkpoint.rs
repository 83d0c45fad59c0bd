//! Versioned single-file checkpoint container.
//!
//! Byte layout (all integers little-endian):
//!
//! | offset | size | field |
//! |---|---|---|
//! | 0 | 8 | magic `LAFCKPT1` |
//! | 8 | 4 | `u32` format version |
//! | 12 | 8 | `u64` metadata length `M` |
//! | 20 | M | UTF-8 JSON metadata |
//! | 20+M | 4·N | `f32` tensor data, in metadata index order |
//! | end-32 | 32 | SHA-256 of every preceding byte |
//!
//! The metadata holds the model config, a tensor index (`name`, `offset`,
//! `len` in elements, `trainable`) and optional training metadata.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggmodel::{AggregationModel, ModelConfig};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 8] = b"LAFCKPT1";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainMetadata {
    pub config: TrainConfig,
    pub seed: u64,
    pub best_val_ap: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    #[serde(default)]
    pub family: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    offset: usize,
    len: usize,
    trainable: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    format_version: u32,
    model_config: ModelConfig,
    tensors: Vec<TensorEntry>,
    train: Option<TrainMetadata>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: AggregationModel<f32>,
    pub train: Option<TrainMetadata>,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

impl Checkpoint {
    pub fn new(model: AggregationModel<f32>, train: Option<TrainMetadata>) -> Result<Self> {
        model.validate()?;
        Ok(Self { format_version: FORMAT_VERSION, model, train })
    }

    /// Error unless the stored model was built for `config`.
    pub fn require_config(&self, config: &ModelConfig) -> Result<()> {
        if &self.model.config != config {
            return Err(Error::ConfigMismatch("checkpoint model config differs from the requested one".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut data: Vec<u8> = Vec::new();
        let mut offset = 0usize;
        self.model.for_each_tensor(&mut |name, trainable, t| {
            tensors.push(TensorEntry { name, offset, len: t.len(), trainable });
            offset += t.len();
            for v in t {
                data.extend_from_slice(&v.to_le_bytes());
            }
        });
        let meta = Metadata {
            format_version: self.format_version,
            model_config: self.model.config.clone(),
            tensors,
            train: self.train.clone(),
        };
        let json = serde_json::to_vec(&meta)?;
        let mut out = Vec::with_capacity(HEADER_LEN + json.len() + data.len() + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN + DIGEST_LEN || &bytes[..8] != MAGIC {
            return Err(format_err("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion { found: version, supported: FORMAT_VERSION });
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(format_err("checksum mismatch (truncated or corrupt file)"));
        }
        let json_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let json_end = usize::try_from(json_len)
            .ok()
            .and_then(|l| HEADER_LEN.checked_add(l))
            .filter(|&e| e <= body.len())
            .ok_or_else(|| format_err("metadata length out of range"))?;
        let meta: Metadata =
            serde_json::from_slice(&body[HEADER_LEN..json_end]).map_err(|e| format_err(format!("metadata: {e}")))?;
        if meta.format_version != version {
            return Err(format_err("header and metadata versions disagree"));
        }
        let data = &body[json_end..];
        let mut model = AggregationModel::<f32>::init(&meta.model_config, 0)?;
        let mut entries = meta.tensors.iter();
        let mut failure: Option<Error> = None;
        let mut used = 0usize;
        model.for_each_tensor_mut(&mut |name, _, t| {
            if failure.is_some() {
                return;
            }
            let Some(e) = entries.next() else {
                failure = Some(format_err("tensor index is shorter than the model"));
                return;
            };
            if e.name != name || e.len != t.len() {
                failure = Some(format_err(format!("tensor {name} missing or mis-sized")));
                return;
            }
            let start = e.offset * 4;
            let Some(raw) = data.get(start..start + 4 * e.len) else {
                failure = Some(format_err(format!("tensor {name} exceeds the data section")));
                return;
            };
            for (v, b) in t.iter_mut().zip(raw.chunks_exact(4)) {
                *v = f32::from_le_bytes(b.try_into().expect("4 bytes"));
            }
            used += e.len;
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if entries.next().is_some() || used * 4 != data.len() {
            return Err(format_err("tensor index does not match the model"));
        }
        Self::new(model, meta.train)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, LayerSpec};
    use crate::tensor::ImageTensor;

    fn small_model(seed: u64) -> AggregationModel<f32> {
        let layers = vec![
            LayerSpec { out_channels: 4, stride: 2, kernel: 3, batch_norm: true },
            LayerSpec { out_channels: 4, stride: 1, kernel: 3, batch_norm: false },
        ];
        let mut c = ModelConfig::new(BackboneConfig { in_channels: 3, input_size: 16, layers });
        c.hidden_dims = [6, 5];
        let mut m = AggregationModel::init(&c, seed).unwrap();
        for (i, w) in m.head.w.iter_mut().enumerate() {
            *w = (i as f32 * 0.37).sin();
        }
        m.head.b = -0.25;
        m
    }

    fn meta() -> TrainMetadata {
        TrainMetadata {
            config: TrainConfig::default(),
            seed: 7,
            best_val_ap: 0.875,
            best_epoch: 3,
            epochs_run: 8,
            family: Some("local_blend".into()),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = Checkpoint::new(small_model(5), Some(meta())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let img = ImageTensor::from_fn(16, 16, 3, |y, x, c| ((y * 7 + x * 3 + c) % 11) as f32 / 11.0);
        assert_eq!(ck.model.logit(&img).unwrap().to_bits(), back.model.logit(&img).unwrap().to_bits());
        assert_eq!(back.to_bytes().unwrap(), ck.to_bytes().unwrap());
    }

    #[test]
    fn bumped_version_rejected() {
        let mut bytes = Checkpoint::new(small_model(1), None).unwrap().to_bytes().unwrap();
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::UnsupportedVersion { found: 2, supported: 1 })
        ));
    }

    #[test]
    fn truncated_and_corrupt_rejected() {
        let bytes = Checkpoint::new(small_model(1), None).unwrap().to_bytes().unwrap();
        for cut in [0, 5, 19, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        let n = flipped.len();
        flipped[n - 40] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Format(_))));
    }

    #[test]
    fn config_mismatch_detected() {
        let ck = Checkpoint::new(small_model(1), None).unwrap();
        assert!(ck.require_config(&ck.model.config).is_ok());
        assert!(matches!(ck.require_config(&ModelConfig::desk_default()), Err(Error::ConfigMismatch(_))));
    }
}

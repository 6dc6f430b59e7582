//! Checkpoint directories: `weights.bin` plus a `meta.json` sidecar.
//!
//! `weights.bin` is an 8-byte magic, a little-endian `u64` parameter count,
//! then the parameters as little-endian `f32`.

use std::fs;
use std::path::Path;

use memos_core::{MetacogModelConfig, MetacogNet, SegModelConfig, SegNet};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::io::{read_json, write_bytes, write_json};

const MAGIC: &[u8; 8] = b"MEMOSW01";
pub const WEIGHTS: &str = "weights.bin";
pub const META: &str = "meta.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Segmentation,
    Metacognitive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelConfig {
    Segmentation(SegModelConfig),
    Metacognitive { num_classes: usize, metacog: MetacogModelConfig },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: ModelKind,
    pub model: ModelConfig,
    /// Run seed the stage was trained under.
    pub seed: u64,
    pub epochs: usize,
    pub dataset_hash: String,
    /// Hash of every config section this artifact depends on.
    pub stage_hash: String,
    pub config_hash: String,
    /// Stage-specific details such as the training hyperparameters.
    #[serde(default)]
    pub details: serde_json::Value,
}

pub fn encode_weights(params: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn decode_weights(path: &Path, bytes: &[u8]) -> Result<Vec<f32>> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(LabError::format(path, "not a weights file"));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() != count * 4 {
        return Err(LabError::format(path, format!("expected {count} parameters, found {} bytes", body.len())));
    }
    Ok(body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
}

fn save(dir: &Path, params: &[f32], meta: &CheckpointMeta) -> Result<()> {
    write_bytes(&dir.join(WEIGHTS), &encode_weights(params))?;
    write_json(&dir.join(META), meta)
}

fn load_params(dir: &Path) -> Result<Vec<f32>> {
    let path = dir.join(WEIGHTS);
    let bytes = fs::read(&path).map_err(|e| LabError::io(&path, e))?;
    decode_weights(&path, &bytes)
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    read_json(&dir.join(META))
}

pub fn exists(dir: &Path) -> bool {
    dir.join(WEIGHTS).is_file() && dir.join(META).is_file()
}

pub fn save_seg(dir: &Path, model: &SegNet, meta: &CheckpointMeta) -> Result<()> {
    save(dir, &model.params(), meta)
}

pub fn load_seg(dir: &Path) -> Result<(SegNet, CheckpointMeta)> {
    let meta = read_meta(dir)?;
    let ModelConfig::Segmentation(config) = &meta.model else {
        return Err(LabError::format(&dir.join(META), "not a segmentation checkpoint"));
    };
    let model = SegNet::from_params(config.clone(), &load_params(dir)?)?;
    Ok((model, meta))
}

pub fn save_metacog(dir: &Path, model: &MetacogNet, meta: &CheckpointMeta) -> Result<()> {
    save(dir, &model.params(), meta)
}

pub fn load_metacog(dir: &Path) -> Result<(MetacogNet, CheckpointMeta)> {
    let meta = read_meta(dir)?;
    let ModelConfig::Metacognitive { num_classes, metacog } = &meta.model else {
        return Err(LabError::format(&dir.join(META), "not a metacognitive checkpoint"));
    };
    let model = MetacogNet::from_params(metacog.clone(), *num_classes, &load_params(dir)?)?;
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_round_trip() {
        let p = vec![0.0, -1.5, f32::MIN_POSITIVE, 3.25e7];
        let path = Path::new("w.bin");
        assert_eq!(decode_weights(path, &encode_weights(&p)).unwrap(), p);
        let mut bad = encode_weights(&p);
        bad.pop();
        assert!(decode_weights(path, &bad).is_err());
        assert!(decode_weights(path, b"garbage").is_err());
    }

    #[test]
    fn seg_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let config = SegModelConfig { num_classes: 4, input_channels: 3, depth: 2, base_width: 8, seed: 3 };
        let model = SegNet::new(config.clone()).unwrap();
        let meta = CheckpointMeta {
            kind: ModelKind::Segmentation,
            model: ModelConfig::Segmentation(config),
            seed: 3,
            epochs: 0,
            dataset_hash: "d".into(),
            stage_hash: "s".into(),
            config_hash: "c".into(),
            details: serde_json::Value::Null,
        };
        save_seg(dir.path(), &model, &meta).unwrap();
        let (back, back_meta) = load_seg(dir.path()).unwrap();
        assert_eq!(back, model);
        assert_eq!(back_meta, meta);
        assert!(load_metacog(dir.path()).is_err());
    }
}

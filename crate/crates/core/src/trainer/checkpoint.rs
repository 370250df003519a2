//! `.lfdn` checkpoint files.
//!
//! ```text
//! "LFDN" | u32 version=1 | u64 manifest_len | manifest (UTF-8 JSON) | payload
//! ```
//!
//! The payload is every parameter tensor as little-endian `f32`, concatenated
//! in canonical order. The manifest lists each tensor's name, shape and byte
//! range, plus the model config, schedule, training metadata and the SHA-256
//! of the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::ScheduleParams;
use crate::error::{Error, Result};
use crate::features::LayerLayout;
use crate::lfdn::{tensor_specs, LfdnConfig, LfdnParams};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LFDN";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: LfdnParams,
    pub schedule: ScheduleParams,
    pub layout: LayerLayout,
    pub normalization_delta: f64,
    pub epoch: usize,
    pub train_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config: LfdnConfig,
    pub schedule: ScheduleParams,
    pub layer_channel_counts: Vec<usize>,
    pub encoder_tag: String,
    pub normalization_delta: f64,
    pub epoch: usize,
    pub train_seed: u64,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: u64,
    pub payload_sha256: String,
}

fn payload(params: &LfdnParams) -> Vec<u8> {
    let n: usize = params.tensors().iter().map(|t| t.len()).sum();
    let mut out = Vec::with_capacity(4 * n);
    for t in params.tensors() {
        for &v in t {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Checkpoint {
    pub fn config(&self) -> &LfdnConfig {
        self.params.config()
    }

    pub fn manifest(&self) -> Manifest {
        let payload = payload(&self.params);
        self.manifest_for(&payload)
    }

    fn manifest_for(&self, payload: &[u8]) -> Manifest {
        let mut offset = 0u64;
        let tensors = self
            .params
            .tensor_specs()
            .into_iter()
            .map(|s| {
                let nbytes = 4 * s.numel() as u64;
                let e = TensorEntry {
                    name: s.name,
                    shape: s.shape,
                    dtype: "f32".into(),
                    offset,
                    nbytes,
                };
                offset += nbytes;
                e
            })
            .collect();
        Manifest {
            format: "LFDN".into(),
            version: CHECKPOINT_VERSION,
            config: *self.config(),
            schedule: self.schedule,
            layer_channel_counts: self.layout.layer_channel_counts().to_vec(),
            encoder_tag: self.layout.encoder_tag().to_owned(),
            normalization_delta: self.normalization_delta,
            epoch: self.epoch,
            train_seed: self.train_seed,
            tensors,
            payload_bytes: payload.len() as u64,
            payload_sha256: sha256_hex(payload),
        }
    }

    /// SHA-256 of the tensor payload.
    pub fn content_hash(&self) -> String {
        sha256_hex(&payload(&self.params))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload = payload(&self.params);
        let manifest =
            serde_json::to_vec(&self.manifest_for(&payload)).expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + manifest.len() + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (manifest, payload) = split_checkpoint(bytes)?;
        let base = 16 + (bytes.len() - 16 - payload.len()) as u64;
        let specs = tensor_specs(&manifest.config);
        if specs.len() != manifest.tensors.len() {
            return Err(Error::format(
                16,
                format!(
                    "manifest lists {} tensors, config implies {}",
                    manifest.tensors.len(),
                    specs.len()
                ),
            ));
        }
        let mut tensors = Vec::with_capacity(specs.len());
        for (spec, entry) in specs.iter().zip(&manifest.tensors) {
            if spec.name != entry.name || spec.shape != entry.shape || entry.dtype != "f32" {
                return Err(Error::format(
                    16,
                    format!("unexpected tensor entry {} {:?}", entry.name, entry.shape),
                ));
            }
            let start = entry.offset as usize;
            let end = start + entry.nbytes as usize;
            if entry.nbytes != 4 * spec.numel() as u64 || end > payload.len() {
                return Err(Error::format(
                    base + entry.offset,
                    format!("tensor {} extends past the payload", entry.name),
                ));
            }
            tensors.push(
                payload[start..end]
                    .chunks_exact(4)
                    .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
                    .collect(),
            );
        }
        let params = LfdnParams::from_tensors(manifest.config, tensors)?;
        let layout = LayerLayout::new(manifest.layer_channel_counts, manifest.encoder_tag)?;
        if layout.total_dim() != manifest.config.input_dim {
            return Err(Error::Checkpoint(format!(
                "layout width {} does not match model input_dim {}",
                layout.total_dim(),
                manifest.config.input_dim
            )));
        }
        Ok(Self {
            params,
            schedule: manifest.schedule,
            layout,
            normalization_delta: manifest.normalization_delta,
            epoch: manifest.epoch,
            train_seed: manifest.train_seed,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Fails unless both checkpoints share architecture, schedule and layout.
    pub fn check_compatible(&self, other: &Checkpoint) -> Result<()> {
        if self.config() != other.config() {
            return Err(Error::Checkpoint(format!(
                "model configs differ: {:?} vs {:?}",
                self.config(),
                other.config()
            )));
        }
        if self.schedule != other.schedule {
            return Err(Error::Checkpoint("noise schedules differ".into()));
        }
        if !self.layout.same_shape(&other.layout) {
            return Err(Error::Checkpoint("feature layouts differ".into()));
        }
        if self.normalization_delta != other.normalization_delta {
            return Err(Error::Checkpoint("normalization deltas differ".into()));
        }
        Ok(())
    }
}

/// Parses the manifest and verifies the payload hash without decoding tensors.
pub fn split_checkpoint(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < 16 {
        return Err(Error::format(
            bytes.len() as u64,
            "truncated checkpoint header",
        ));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "bad magic, expected LFDN"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            4,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let end = 16u64
        .checked_add(len)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| Error::format(8, "manifest length exceeds file"))? as usize;
    let manifest: Manifest = serde_json::from_slice(&bytes[16..end])
        .map_err(|e| Error::format(16, format!("manifest: {e}")))?;
    let payload = &bytes[end..];
    if payload.len() as u64 != manifest.payload_bytes {
        return Err(Error::format(
            end as u64,
            format!(
                "payload is {} bytes, manifest says {}",
                payload.len(),
                manifest.payload_bytes
            ),
        ));
    }
    let hash = sha256_hex(payload);
    if hash != manifest.payload_sha256 {
        return Err(Error::Checkpoint(format!(
            "payload hash {hash} does not match manifest {}",
            manifest.payload_sha256
        )));
    }
    Ok((manifest, payload))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let cfg = LfdnConfig {
            num_blocks: 2,
            time_embed_dim: 8,
            ..LfdnConfig::new(6)
        };
        let mut params = LfdnParams::init(cfg, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for v in params.blocks[1].lin2_w.iter_mut() {
            *v = f64::from(rng.random_range(-1.0f32..1.0));
        }
        Checkpoint {
            params,
            schedule: ScheduleParams::default(),
            layout: LayerLayout::new(vec![2, 4], "synthetic").unwrap(),
            normalization_delta: 1e-5,
            epoch: 3,
            train_seed: 42,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.content_hash(), ck.content_hash());
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn manifest_offsets_are_contiguous() {
        let m = sample().manifest();
        let mut expect = 0;
        for t in &m.tensors {
            assert_eq!(t.offset, expect);
            expect += t.nbytes;
        }
        assert_eq!(expect, m.payload_bytes);
    }

    #[test]
    fn corrupted_payload_detected() {
        let mut bytes = sample().to_bytes();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Checkpoint(_))
        ));
        let bytes = sample().to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 4]),
            Err(Error::Format { .. })
        ));
        let mut bytes = sample().to_bytes();
        bytes[1] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn compatibility() {
        let a = sample();
        let mut b = sample();
        b.epoch = 10;
        a.check_compatible(&b).unwrap();
        b.schedule.steps = 50;
        assert!(a.check_compatible(&b).is_err());
    }
}

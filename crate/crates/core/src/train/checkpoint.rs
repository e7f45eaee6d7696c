//! Binary checkpoint format.
//!
//! Layout: the 8 magic bytes `MIXMOE01`, a little-endian `u64` byte length,
//! that many bytes of UTF-8 JSON metadata, then every tensor of the manifest
//! (parameters first, then optimizer moments) as little-endian `f64` values.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{StageConfig, TrainState};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{AdamWConfig, OptimizerState, ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"MIXMOE01";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

/// Position of the batch sampler inside its ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: u64,
    /// `u128` word position, decimal.
    pub word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerMeta {
    pub step: u64,
    pub config: AdamWConfig,
    /// Parameters with moment tensors; each contributes `m` then `v`.
    pub tracked: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub model: ModelConfig,
    /// 0 for a dense model that has not entered the pipeline.
    pub stage: u8,
    pub step: u64,
    pub stage_config: Option<StageConfig>,
    /// Identifies the base model a checkpoint descends from.
    pub lineage: String,
    pub manifest: Vec<ManifestEntry>,
    pub optimizer: Option<OptimizerMeta>,
    pub rng: Option<RngState>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: Model,
    pub optimizer: Option<OptimizerState>,
}

fn manifest(store: &ParamStore) -> Vec<ManifestEntry> {
    store
        .iter()
        .map(|(_, name, t)| ManifestEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            trainable: t.requires_grad(),
        })
        .collect()
}

impl Checkpoint {
    /// A model without optimizer or sampler state.
    pub fn from_model(model: Model, stage: u8, lineage: impl Into<String>) -> Self {
        let meta = CheckpointMeta {
            format_version: FORMAT_VERSION,
            model: model.cfg.clone(),
            stage,
            step: 0,
            stage_config: None,
            lineage: lineage.into(),
            manifest: manifest(&model.store),
            optimizer: None,
            rng: None,
        };
        Self {
            meta,
            model,
            optimizer: None,
        }
    }

    pub fn from_state(state: &TrainState, lineage: impl Into<String>) -> Self {
        let store = &state.model.store;
        let meta = CheckpointMeta {
            format_version: FORMAT_VERSION,
            model: state.model.cfg.clone(),
            stage: state.stage,
            step: state.step,
            stage_config: Some(state.config.clone()),
            lineage: lineage.into(),
            manifest: manifest(store),
            optimizer: Some(OptimizerMeta {
                step: state.optimizer.step,
                config: state.optimizer.config,
                tracked: state.optimizer.tracked().map(|id| store.name(id).to_string()).collect(),
            }),
            rng: Some(RngState {
                seed: state.config.seed,
                word_pos: state.rng.get_word_pos().to_string(),
            }),
        };
        Self {
            meta,
            model: state.model.clone(),
            optimizer: Some(state.optimizer.clone()),
        }
    }

    /// Rebuilds the training state for resumption.
    pub fn into_state(self) -> Result<TrainState> {
        let config = self
            .meta
            .stage_config
            .ok_or_else(|| Error::Lineage("checkpoint carries no training state".into()))?;
        let rng_meta = self
            .meta
            .rng
            .ok_or_else(|| Error::Lineage("checkpoint carries no sampler state".into()))?;
        let word_pos: u128 = rng_meta
            .word_pos
            .parse()
            .map_err(|_| Error::Manifest(format!("bad rng word position {}", rng_meta.word_pos)))?;
        let mut rng = ChaCha8Rng::seed_from_u64(rng_meta.seed);
        rng.set_word_pos(word_pos);
        Ok(TrainState {
            model: self.model,
            stage: self.meta.stage,
            optimizer: self
                .optimizer
                .ok_or_else(|| Error::Lineage("checkpoint carries no optimizer state".into()))?,
            step: self.meta.step,
            rng,
            config,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * self.model.store.numel());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, t) in self.model.store.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(opt) = &self.optimizer {
            for id in opt.tracked() {
                let (m, v) = opt.moments(id).expect("tracked");
                for x in m.iter().chain(v) {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::BadMagic);
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes
            .get(16..16usize.saturating_add(len))
            .ok_or_else(|| Error::Manifest("metadata block is truncated".into()))?;
        let meta: CheckpointMeta =
            serde_json::from_slice(json).map_err(|e| Error::Manifest(format!("metadata does not parse: {e}")))?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::Manifest(format!("unsupported format version {}", meta.format_version)));
        }
        let numel = |shape: &[usize]| shape.iter().product::<usize>();
        let param_values: usize = meta.manifest.iter().map(|e| numel(&e.shape)).sum();
        let moment_values: usize = match &meta.optimizer {
            Some(o) => o
                .tracked
                .iter()
                .map(|name| {
                    meta.manifest
                        .iter()
                        .find(|e| &e.name == name)
                        .map(|e| 2 * numel(&e.shape))
                        .ok_or_else(|| Error::Manifest(format!("optimizer tracks unknown tensor {name}")))
                })
                .sum::<Result<usize>>()?,
            None => 0,
        };
        let payload = &bytes[16 + len..];
        let expected = 8 * (param_values + moment_values);
        if payload.len() != expected {
            return Err(Error::PayloadSize {
                expected,
                found: payload.len(),
            });
        }
        let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut store = ParamStore::new();
        for e in &meta.manifest {
            let data: Vec<f64> = values.by_ref().take(numel(&e.shape)).collect();
            let mut t = Tensor::new(e.shape.clone(), data).map_err(|err| Error::Manifest(err.to_string()))?;
            t.set_requires_grad(e.trainable);
            store.add(e.name.clone(), t).map_err(|err| Error::Manifest(err.to_string()))?;
        }
        let optimizer = match &meta.optimizer {
            Some(o) => {
                let mut state = OptimizerState::new(o.config);
                state.step = o.step;
                for name in &o.tracked {
                    let id = store.id(name).expect("validated above");
                    let n = store.get(id).len();
                    let m: Vec<f64> = values.by_ref().take(n).collect();
                    let v: Vec<f64> = values.by_ref().take(n).collect();
                    state.set_moments(id, m, v);
                }
                Some(state)
            }
            None => None,
        };
        let model = Model::from_store(meta.model.clone(), store)?;
        Ok(Self { meta, model, optimizer })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_dense_model, convert_to_mixmoe};

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            d_ff: 32,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 16,
            moe_interval: 2,
            ..Default::default()
        }
    }

    #[test]
    fn byte_identical_round_trip() {
        let model = convert_to_mixmoe(&build_dense_model(&cfg()).unwrap()).unwrap();
        let ck = Checkpoint::from_model(model, 1, "abc");
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(&bytes[..8], b"MIXMOE01");
    }

    #[test]
    fn distinct_error_kinds() {
        let model = build_dense_model(&cfg()).unwrap();
        let bytes = Checkpoint::from_model(model, 0, "x").to_bytes().unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::BadMagic)));

        let truncated = &bytes[..bytes.len() - 8];
        assert!(matches!(
            Checkpoint::from_bytes(truncated),
            Err(Error::PayloadSize { .. })
        ));

        let mut garbled = bytes.clone();
        garbled[17] = b'#';
        assert!(matches!(Checkpoint::from_bytes(&garbled), Err(Error::Manifest(_))));

        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut meta: CheckpointMeta = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
        meta.model.d_ff = 64;
        let json = serde_json::to_vec(&meta).unwrap();
        let mut other = MAGIC.to_vec();
        other.extend((json.len() as u64).to_le_bytes());
        other.extend(json);
        other.extend(&bytes[16 + len..]);
        assert!(matches!(Checkpoint::from_bytes(&other), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn file_round_trip_creates_directories() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/b/model.ckpt");
        let model = build_dense_model(&cfg()).unwrap();
        let ck = Checkpoint::from_model(model, 0, "x");
        save_checkpoint(&ck, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ck);
        assert!(matches!(load_checkpoint(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}

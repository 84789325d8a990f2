//! Versioned JSON checkpoints. Floats are written with round-trip precision,
//! so a save/load cycle reproduces every parameter bitwise.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::model::{Model, ModelConfig, ModelParams};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "tmignn-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Container {
    format: String,
    version: u32,
    config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vocab: Option<Vec<String>>,
    tensors: Vec<NamedTensor>,
}

/// A model plus the raw item ids its vocabulary indices stand for.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab: Option<Vec<String>>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String, ModelError> {
        let tensors = self
            .model
            .params
            .named()
            .into_iter()
            .map(|(name, t)| NamedTensor {
                name,
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect();
        let container = Container {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.model.config.clone(),
            vocab: self.vocab.clone(),
            tensors,
        };
        serde_json::to_string(&container).map_err(|e| ModelError::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let c: Container = serde_json::from_str(text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if c.format != CHECKPOINT_FORMAT {
            return Err(ModelError::Checkpoint(format!(
                "not a checkpoint (format {:?})",
                c.format
            )));
        }
        if c.version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                c.version
            )));
        }
        c.config.validate()?;
        if let Some(v) = &c.vocab {
            if v.len() != c.config.item_count {
                return Err(ModelError::Checkpoint(format!(
                    "vocabulary has {} entries but the model expects {}",
                    v.len(),
                    c.config.item_count
                )));
            }
        }
        let mut params = ModelParams::zeros(&c.config);
        let expected = params.named().len();
        if c.tensors.len() != expected {
            return Err(ModelError::Checkpoint(format!(
                "expected {expected} tensors, found {}",
                c.tensors.len()
            )));
        }
        let mut stored = c.tensors.into_iter();
        let mut failure = None;
        params.visit_mut(&mut |name, slot| {
            let t = stored.next().expect("count checked");
            if failure.is_some() {
                return;
            }
            if t.name != name || t.shape != slot.shape() {
                failure = Some(format!(
                    "tensor {} {:?} does not match expected {name} {:?}",
                    t.name,
                    t.shape,
                    slot.shape()
                ));
                return;
            }
            match Tensor::new(t.shape, t.data) {
                Ok(v) => *slot = v,
                Err(e) => failure = Some(format!("tensor {name}: {e}")),
            }
        });
        if let Some(msg) = failure {
            return Err(ModelError::Checkpoint(msg));
        }
        Ok(Checkpoint {
            model: Model {
                config: c.config,
                params,
            },
            vocab: c.vocab,
        })
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<(), ModelError> {
    let text = checkpoint.to_json()?;
    fs::write(path, text).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let text = fs::read_to_string(path).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
    Checkpoint::from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig {
            dim: 4,
            layers: 2,
            ..ModelConfig::new(5)
        };
        Checkpoint {
            model: Model::new(cfg, 11).unwrap(),
            vocab: Some((0..5).map(|i| format!("item{i}")).collect()),
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let mut ck = sample();
        ck.model.params.item_embeddings.data_mut()[0] = 0.1 + 0.2;
        ck.model.params.item_embeddings.data_mut()[1] = f64::MIN_POSITIVE;
        save_checkpoint(&path, &ck).unwrap();
        let back = load_checkpoint(&path).unwrap();
        for ((_, a), (_, b)) in ck.model.params.named().iter().zip(back.model.params.named()) {
            let abits: Vec<u64> = a.data().iter().map(|x| x.to_bits()).collect();
            let bbits: Vec<u64> = b.data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(abits, bbits);
        }
        assert_eq!(back, ck);
    }

    #[test]
    fn version_mismatch_rejected() {
        let text = sample()
            .to_json()
            .unwrap()
            .replacen("\"version\":1", "\"version\":9", 1);
        assert!(matches!(Checkpoint::from_json(&text), Err(ModelError::Checkpoint(m)) if m.contains("version")));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let text = sample().to_json().unwrap().replacen("\"dim\":4", "\"dim\":5", 1);
        assert!(Checkpoint::from_json(&text).is_err());
    }
}

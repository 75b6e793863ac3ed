//! Model checkpoints: the prior, every parameter tensor, the Breslow
//! baseline, the dictionary hash the model was trained against, and the
//! training config. Checkpoints round-trip bit-exactly through JSON.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grad::Tensor;
use crate::survival::{CoxHead, SurvivalCurve};
use crate::topic::{names, DecoderParams, EncoderParams, PriorSpec, TopicError};
use crate::trainer::TrainConfig;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Topic(#[from] TopicError),
    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub prior: PriorSpec,
    pub params: BTreeMap<String, Tensor>,
    pub baseline: SurvivalCurve,
    pub vocab_hash: String,
    pub config: TrainConfig,
}

impl ModelCheckpoint {
    pub fn encoder(&self) -> Result<EncoderParams, CheckpointError> {
        Ok(EncoderParams::from_map(&self.params)?)
    }

    pub fn decoder(&self) -> Result<DecoderParams, CheckpointError> {
        Ok(DecoderParams::from_map(&self.params)?)
    }

    pub fn cox_head(&self) -> Result<CoxHead, CheckpointError> {
        let beta = self
            .params
            .get(names::BETA)
            .ok_or_else(|| CheckpointError::MissingTensor(names::BETA.to_string()))?;
        Ok(CoxHead {
            beta: beta.data().to_vec(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(json: &str) -> Result<Self, CheckpointError> {
        Ok(serde_json::from_str(json)?)
    }

    /// Writes via a sibling temp file and rename, so readers never observe a
    /// half-written checkpoint.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, self.to_json())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_checkpoint() -> ModelCheckpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (d, h, k) = (7, 4, 3);
        let enc = EncoderParams::init_random(d, h, k, &mut rng);
        let dec = DecoderParams::init_random(vec![-1.5; d], k, &mut rng);
        let mut params = BTreeMap::new();
        enc.bind_into(&mut params);
        dec.bind_into(&mut params);
        params.insert(
            names::BETA.to_string(),
            Tensor::vector(vec![0.25, -0.125, 1.0 / 3.0]),
        );
        ModelCheckpoint {
            prior: PriorSpec::new(k, 1.0).unwrap(),
            params,
            baseline: SurvivalCurve::from_hazards(vec![1.0, 2.5], vec![0.2, 0.3]).unwrap(),
            vocab_hash: "deadbeef".to_string(),
            config: TrainConfig::default(),
        }
    }

    #[test]
    fn json_roundtrip_is_bit_exact() {
        let ckpt = toy_checkpoint();
        let json = ckpt.to_json();
        let back = ModelCheckpoint::from_json(&json).unwrap();
        assert_eq!(ckpt, back);
        assert_eq!(json, back.to_json());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let ckpt = toy_checkpoint();
        ckpt.save(&path).unwrap();
        let back = ModelCheckpoint::load(&path).unwrap();
        assert_eq!(ckpt, back);
    }

    #[test]
    fn typed_accessors_rebuild_params() {
        let ckpt = toy_checkpoint();
        let enc = ckpt.encoder().unwrap();
        assert_eq!(enc.dims(), (7, 4, 3));
        let dec = ckpt.decoder().unwrap();
        assert_eq!(dec.dims(), (3, 7));
        let head = ckpt.cox_head().unwrap();
        assert_eq!(head.beta.len(), 3);
    }

    #[test]
    fn missing_beta_is_reported() {
        let mut ckpt = toy_checkpoint();
        ckpt.params.remove(names::BETA);
        assert!(matches!(
            ckpt.cox_head(),
            Err(CheckpointError::MissingTensor(_))
        ));
    }
}

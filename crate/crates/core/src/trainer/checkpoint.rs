//! Checkpoints: a weight blob plus a JSON sidecar at `<path>.json`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{TrainError, TrainState};
use crate::model_zoo::{blob, BackboneName, BackboneSpec, ClassifierHead, CompactCnn, Model, ModelError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub backbone: BackboneName,
    pub feature_dim: usize,
    pub input_size: usize,
    pub pretrained: bool,
    pub dropout: f64,
    pub seed: u64,
    pub epoch: usize,
    pub val_auc: Option<f64>,
    pub weights_sha256: String,
    pub config_hash: Option<String>,
    pub state: TrainState,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: CheckpointMeta,
    /// Optimiser state, present in checkpoints written for resuming.
    pub optimizer: Option<Vec<Vec<f64>>>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn io(path: &Path, source: std::io::Error) -> TrainError {
    TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// What to record alongside the weights.
#[derive(Debug, Clone, Default)]
pub struct CheckpointInfo<'a> {
    pub seed: u64,
    pub epoch: usize,
    pub val_auc: Option<f64>,
    pub config_hash: Option<&'a str>,
    pub optimizer: Option<Vec<Vec<f64>>>,
}

pub fn save_checkpoint(model: &Model, state: &TrainState, path: &Path, info: CheckpointInfo<'_>) -> Result<CheckpointMeta, TrainError> {
    let params = model.params();
    let extra: Option<Vec<&[f64]>> = info.optimizer.as_ref().map(|o| o.iter().map(Vec::as_slice).collect());
    let bytes = blob::encode(&params, extra.as_deref());
    let spec = model.spec();
    let meta = CheckpointMeta {
        backbone: spec.name,
        feature_dim: spec.feature_dim,
        input_size: model.input_size(),
        pretrained: spec.pretrained,
        dropout: model.head().dropout_rate(),
        seed: info.seed,
        epoch: info.epoch,
        val_auc: info.val_auc,
        weights_sha256: hex::encode(Sha256::digest(&bytes)),
        config_hash: info.config_hash.map(str::to_owned),
        state: state.clone(),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    fs::write(path, &bytes).map_err(|e| io(path, e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&meta).expect("metadata serialises");
    fs::write(&side, json + "\n").map_err(|e| io(&side, e))?;
    Ok(meta)
}

pub fn read_meta(path: &Path) -> Result<CheckpointMeta, TrainError> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| io(&side, e))?;
    serde_json::from_str(&text).map_err(|e| TrainError::Model(ModelError::CorruptBlob(format!("{}: {e}", side.display()))))
}

/// Loads a checkpoint and checks it against `expected` (name and width).
pub fn load_checkpoint(path: &Path, expected: &BackboneSpec) -> Result<Checkpoint, TrainError> {
    let meta = read_meta(path)?;
    if meta.backbone != expected.name || meta.feature_dim != expected.feature_dim {
        return Err(ModelError::MetadataMismatch(format!(
            "checkpoint holds {} (d={}), expected {} (d={})",
            meta.backbone, meta.feature_dim, expected.name, expected.feature_dim
        ))
        .into());
    }
    let bytes = fs::read(path).map_err(|e| io(path, e))?;
    if hex::encode(Sha256::digest(&bytes)) != meta.weights_sha256 {
        return Err(ModelError::MetadataMismatch(format!("{} does not match its sidecar digest", path.display())).into());
    }
    let decoded = blob::decode(&bytes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let backbone = CompactCnn::new(meta.feature_dim, meta.input_size, &mut rng)?;
    let mut head = ClassifierHead::zeroed(meta.feature_dim);
    head.set_dropout_rate(meta.dropout);
    let spec = BackboneSpec {
        name: meta.backbone,
        feature_dim: meta.feature_dim,
        pretrained: meta.pretrained,
    };
    let mut model = Model::from_parts(spec, backbone, head, false, meta.seed);
    blob::assign(model.params_mut(), decoded.tensors)?;
    Ok(Checkpoint {
        model,
        meta,
        optimizer: decoded.extra,
    })
}

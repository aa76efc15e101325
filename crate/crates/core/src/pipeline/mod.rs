//! Configuration-driven pipeline stages with on-disk artifacts between them.
//!
//! Every text artifact starts with a `config_hash=<h> seed=<s>` provenance
//! line (as a comment in CSV and Markdown, as fields in JSON); PNG figures
//! carry the same values in tEXt chunks.

mod layout;
mod stages;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use layout::Layout;
pub use stages::{
    evaluate, load_plan, load_prepared, prepare, report, split, train, EvalSummary, MetricsFile, PrepareSummary, TrainSummary,
};

use crate::augment::AugmentRanges;
use crate::model_zoo::{BackboneName, BackboneSpec};
use crate::trainer::TrainConfig;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("cannot parse config {path}: {reason}")]
    ConfigParse { path: PathBuf, reason: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("the reproduction profile pins {0}; remove the override or use the desk profile")]
    ReproductionOverride(String),
    #[error("record {image_id}: cannot read {path}: {reason}")]
    UnreadableImage { image_id: String, path: PathBuf, reason: String },
    #[error("fold plan leaks patients across partitions: {0}")]
    Leakage(String),
    #[error("missing artifact {0}; run the earlier stage first")]
    MissingArtifact(PathBuf),
    #[error("missing checkpoint {0}; run train first")]
    MissingCheckpoint(PathBuf),
    #[error("{path} was produced with config hash {found}, expected {expected}")]
    MixedProvenance { path: PathBuf, found: String, expected: String },
    #[error("fold {fold} out of range for k = {k}")]
    FoldOutOfRange { fold: usize, k: usize },
    #[error("malformed artifact {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    pub fn is_validation(&self) -> bool {
        !matches!(self, PipelineError::Io { .. })
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.into(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Reduced input size, randomly initialised compact backbones.
    #[default]
    Desk,
    /// 512x512 inputs, reference widths, pretrained weights, and every
    /// training hyperparameter fixed at its default.
    Reproduction,
}

impl Profile {
    pub fn default_image_size(self) -> usize {
        match self {
            Profile::Desk => 128,
            Profile::Reproduction => crate::preprocess::MODEL_INPUT_SIZE,
        }
    }
}

impl std::str::FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "desk" => Ok(Profile::Desk),
            "reproduction" => Ok(Profile::Reproduction),
            other => Err(format!("unknown profile {other:?} (expected desk or reproduction)")),
        }
    }
}

fn default_backbones() -> Vec<BackboneName> {
    BackboneName::ALL.to_vec()
}

fn default_k() -> usize {
    5
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub profile: Profile,
    /// Still-image manifest (Test-1 and training data).
    pub manifest: PathBuf,
    /// Optional second evaluation manifest (video frames).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test2_manifest: Option<PathBuf>,
    pub output_dir: PathBuf,
    #[serde(default = "default_backbones")]
    pub backbones: Vec<BackboneName>,
    #[serde(default = "default_k")]
    pub k: usize,
    /// Defaults to the profile's size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_size: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub deterministic: bool,
    /// Directory of `<backbone>.weights` blobs for pretrained backbones.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights_dir: Option<PathBuf>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub augment: AugmentRanges,
    /// Relative paths are resolved against this directory.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    /// A desk-profile config with defaults for everything but the paths.
    pub fn new(manifest: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        RunConfig {
            profile: Profile::Desk,
            manifest: manifest.into(),
            test2_manifest: None,
            output_dir: output_dir.into(),
            backbones: default_backbones(),
            k: default_k(),
            image_size: None,
            seed: 0,
            deterministic: true,
            weights_dir: None,
            train: TrainConfig::default(),
            augment: AugmentRanges::default(),
            base_dir: PathBuf::new(),
        }
    }

    pub fn from_toml(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self, PipelineError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| PipelineError::ConfigParse {
            path: PathBuf::from("<inline>"),
            reason: e.to_string(),
        })?;
        cfg.base_dir = base_dir.into();
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| PipelineError::ConfigParse {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        RunConfig::from_toml(&text, base).map_err(|e| match e {
            PipelineError::ConfigParse { reason, .. } => PipelineError::ConfigParse {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises to TOML")
    }

    /// Applies command-line overrides.
    pub fn with_overrides(mut self, profile: Option<Profile>, seed: Option<u64>) -> Self {
        if let Some(p) = profile {
            self.profile = p;
        }
        if let Some(s) = seed {
            self.seed = s;
        }
        self
    }

    pub fn image_size(&self) -> usize {
        self.image_size.unwrap_or_else(|| self.profile.default_image_size())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.resolve(&self.output_dir))
    }

    pub fn backbone_spec(&self, name: BackboneName) -> BackboneSpec {
        match self.profile {
            Profile::Desk => BackboneSpec::desk(name),
            Profile::Reproduction => BackboneSpec::reference(name),
        }
    }

    /// Seed for fold `fold`: `seed + fold`.
    pub fn fold_seed(&self, fold: usize) -> u64 {
        self.seed.wrapping_add(fold as u64)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.k < 3 {
            return bad(format!("k must be at least 3, got {}", self.k));
        }
        if self.backbones.is_empty() {
            return bad("backbones is empty".into());
        }
        let mut seen = self.backbones.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.backbones.len() {
            return bad("backbones lists a name twice".into());
        }
        let size = self.image_size();
        if size < crate::model_zoo::STEM_GRID || !size.is_multiple_of(crate::model_zoo::STEM_GRID) {
            return bad(format!("image_size must be a positive multiple of {}, got {size}", crate::model_zoo::STEM_GRID));
        }
        self.train.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.augment.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.profile == Profile::Reproduction {
            let mut pinned = Vec::new();
            if size != crate::preprocess::MODEL_INPUT_SIZE {
                pinned.push("image_size");
            }
            if self.k != 5 {
                pinned.push("k");
            }
            if self.train != (TrainConfig { seed: self.train.seed, ..TrainConfig::default() }) {
                pinned.push("[train]");
            }
            if self.augment != AugmentRanges::default() {
                pinned.push("[augment]");
            }
            if !pinned.is_empty() {
                return Err(PipelineError::ReproductionOverride(pinned.join(", ")));
            }
            if self.weights_dir.is_none() {
                return bad("the reproduction profile needs weights_dir for pretrained backbones".into());
            }
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form, with
    /// the backbone list and output directory left out so that models
    /// trained under one experiment share a hash wherever they are written.
    pub fn config_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serialises");
        let obj = v.as_object_mut().expect("struct serialises to an object");
        obj.remove("backbones");
        obj.remove("output_dir");
        obj.insert("image_size".into(), self.image_size().into());
        let canonical = serde_json::to_string(&v).expect("value serialises");
        hex::encode(Sha256::digest(canonical.as_bytes()))[..16].to_owned()
    }

    pub fn provenance_line(&self) -> String {
        format!("config_hash={} seed={}", self.config_hash(), self.seed)
    }
}

/// Reads `config_hash=...` from the leading comment lines of a text artifact.
pub fn read_provenance_hash(text: &str) -> Option<&str> {
    text.lines()
        .take_while(|l| l.starts_with('#') || l.starts_with("<!--"))
        .find_map(|l| l.split_whitespace().find_map(|w| w.strip_prefix("config_hash=")))
}

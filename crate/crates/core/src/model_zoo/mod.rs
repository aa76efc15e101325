//! Backbones behind a uniform adapter, plus the classification head.

mod backbone;
pub mod blob;
mod head;
mod nn;

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use backbone::{BackboneName, BackboneSpec, CompactCache, CompactCnn, FeatureExtractor, DESK_WIDTH_DIVISOR, STEM_GRID};
pub use head::{ClassifierHead, DropoutMasks, HeadCache, HEAD_DROPOUT};
pub(crate) use nn::sigmoid;

use crate::preprocess::ModelInput;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown backbone {0:?}")]
    UnknownBackbone(String),
    #[error("pretrained weights for {name} not found at {path}")]
    WeightsUnavailable { name: BackboneName, path: PathBuf },
    #[error("model expects {expected}x{expected} inputs, got {found}x{found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid backbone spec: {0}")]
    InvalidSpec(String),
    #[error("weights do not match model: {0}")]
    MetadataMismatch(String),
    #[error("corrupt weight blob: {0}")]
    CorruptBlob(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildOptions {
    /// Side length of the square model input.
    pub input_size: usize,
    /// Seeds weight initialisation and the dropout stream.
    pub seed: u64,
    /// Directory holding `<backbone>.weights` blobs for pretrained specs.
    pub weights_dir: Option<PathBuf>,
    pub freeze_backbone: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            input_size: crate::preprocess::MODEL_INPUT_SIZE,
            seed: 0,
            weights_dir: None,
            freeze_backbone: false,
        }
    }
}

/// Backbone plus head. Outputs are probabilities strictly inside (0, 1).
#[derive(Debug, Clone)]
pub struct Model<B: FeatureExtractor = CompactCnn> {
    spec: BackboneSpec,
    backbone: B,
    head: ClassifierHead,
    mode: Mode,
    frozen_backbone: bool,
    dropout_rng: ChaCha8Rng,
}

/// Everything needed to backpropagate one sample.
pub struct SampleCache<C> {
    backbone: C,
    head: HeadCache,
}

/// Clamps a probability away from exactly 0 or 1.
pub(crate) fn open_unit(p: f64) -> f64 {
    p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

pub fn weights_path(dir: &Path, name: BackboneName) -> PathBuf {
    dir.join(format!("{}.weights", name.as_str()))
}

/// Builds a model for `spec`. Pretrained specs load backbone weights from
/// `options.weights_dir`; the head is always freshly initialised.
pub fn build_model(spec: &BackboneSpec, options: &BuildOptions) -> Result<Model, ModelError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut backbone = CompactCnn::new(spec.feature_dim, options.input_size, &mut rng)?;
    if spec.pretrained {
        let path = options
            .weights_dir
            .as_deref()
            .map(|d| weights_path(d, spec.name))
            .unwrap_or_else(|| PathBuf::from(format!("<no weights dir>/{}.weights", spec.name)));
        if !path.is_file() {
            return Err(ModelError::WeightsUnavailable { name: spec.name, path });
        }
        let tensors = blob::read_file(&path)?;
        blob::assign(backbone.params_mut(), tensors.tensors)?;
    }
    let head = ClassifierHead::new(spec.feature_dim, &mut rng);
    Ok(Model::from_parts(*spec, backbone, head, options.freeze_backbone, options.seed))
}

impl<B: FeatureExtractor> Model<B> {
    pub fn from_parts(spec: BackboneSpec, backbone: B, head: ClassifierHead, frozen_backbone: bool, seed: u64) -> Self {
        assert_eq!(backbone.feature_dim(), head.feature_dim(), "backbone and head widths differ");
        Model {
            spec,
            backbone,
            head,
            mode: Mode::Eval,
            frozen_backbone,
            dropout_rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn backbone(&self) -> &B {
        &self.backbone
    }

    pub fn head(&self) -> &ClassifierHead {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut ClassifierHead {
        &mut self.head
    }

    pub fn input_size(&self) -> usize {
        self.backbone.input_size()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn is_backbone_frozen(&self) -> bool {
        self.frozen_backbone
    }

    pub fn set_backbone_frozen(&mut self, frozen: bool) {
        self.frozen_backbone = frozen;
    }

    /// Restarts the dropout stream; used so resumed training replays exactly.
    pub fn reseed_dropout(&mut self, seed: u64, stream: u64) {
        self.dropout_rng = ChaCha8Rng::seed_from_u64(seed);
        self.dropout_rng.set_stream(stream);
    }

    /// One probability per input. In train mode dropout is active and draws
    /// from the model's own random stream.
    pub fn forward(&mut self, batch: &[ModelInput]) -> Result<Vec<f64>, ModelError> {
        match self.mode {
            Mode::Eval => self.predict(batch),
            Mode::Train => {
                if batch.is_empty() {
                    return Err(ModelError::EmptyBatch);
                }
                batch
                    .iter()
                    .map(|x| self.forward_sample(x).map(|(z, _)| open_unit(sigmoid(z))))
                    .collect()
            }
        }
    }

    /// Evaluation-mode probabilities regardless of the current mode.
    pub fn predict(&self, batch: &[ModelInput]) -> Result<Vec<f64>, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        batch
            .iter()
            .map(|x| {
                let (f, _) = self.backbone.extract(x)?;
                Ok(open_unit(sigmoid(self.head.logit(&f))))
            })
            .collect()
    }

    /// Logit and cache for one sample, honouring the current mode.
    pub fn forward_sample(&mut self, input: &ModelInput) -> Result<(f64, SampleCache<B::Cache>), ModelError> {
        let (features, bcache) = self.backbone.extract(input)?;
        let masks = (self.mode == Mode::Train).then(|| self.head.sample_masks(&mut self.dropout_rng));
        let (logit, hcache) = self.head.forward(&features, masks);
        Ok((logit, SampleCache { backbone: bcache, head: hcache }))
    }

    /// Accumulates gradients of `dlogit * logit` into `grads` (laid out like
    /// [`Model::params`]). Backbone gradients are skipped when frozen.
    pub fn backward_sample(&self, cache: &SampleCache<B::Cache>, dlogit: f64, grads: &mut [Vec<f64>]) {
        let n_backbone = self.backbone.params().len();
        let (bgrads, hgrads) = grads.split_at_mut(n_backbone);
        let dfeat = self.head.backward(&cache.head, dlogit, hgrads);
        if !self.frozen_backbone {
            self.backbone.backprop(&cache.backbone, &dfeat, bgrads);
        }
    }

    /// Backbone tensors followed by head tensors.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut v = self.backbone.params();
        v.extend(self.head.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut v = self.backbone.params_mut();
        v.extend(self.head.params_mut());
        v
    }

    /// Indices into [`Model::params`] that the optimiser updates.
    pub fn trainable_tensors(&self) -> std::ops::Range<usize> {
        let n_backbone = self.backbone.params().len();
        let start = if self.frozen_backbone { n_backbone } else { 0 };
        start..n_backbone + self.head.params().len()
    }

    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.params().iter().map(|p| vec![0.0; p.len()]).collect()
    }
}

pub fn count_trainable_parameters<B: FeatureExtractor>(model: &Model<B>) -> usize {
    let params = model.params();
    model.trainable_tensors().map(|i| params[i].len()).sum()
}

pub fn count_parameters<B: FeatureExtractor>(model: &Model<B>) -> usize {
    model.params().iter().map(|p| p.len()).sum()
}

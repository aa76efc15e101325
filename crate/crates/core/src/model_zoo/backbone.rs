use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::nn::{conv_out, relu_backward, relu_in_place, Conv3x3, Dense};
use super::ModelError;
use crate::preprocess::ModelInput;

/// The five supported backbone architectures, in results-table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BackboneName {
    #[serde(rename = "xception")]
    Xception,
    #[serde(rename = "inception_resnet_v2")]
    InceptionResnetV2,
    #[serde(rename = "resnet50")]
    Resnet50,
    #[serde(rename = "efficientnet_b2")]
    EfficientnetB2,
    #[serde(rename = "densenet121")]
    Densenet121,
}

impl BackboneName {
    pub const ALL: [BackboneName; 5] = [
        BackboneName::Xception,
        BackboneName::InceptionResnetV2,
        BackboneName::Resnet50,
        BackboneName::EfficientnetB2,
        BackboneName::Densenet121,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BackboneName::Xception => "xception",
            BackboneName::InceptionResnetV2 => "inception_resnet_v2",
            BackboneName::Resnet50 => "resnet50",
            BackboneName::EfficientnetB2 => "efficientnet_b2",
            BackboneName::Densenet121 => "densenet121",
        }
    }

    /// Row label used in the results table.
    pub fn display_name(self) -> &'static str {
        match self {
            BackboneName::Xception => "Xception",
            BackboneName::InceptionResnetV2 => "InceptionResnetv2 (Inceptionv4)",
            BackboneName::Resnet50 => "ResNet50",
            BackboneName::EfficientnetB2 => "EfficientnetB2",
            BackboneName::Densenet121 => "Densenet121",
        }
    }

    /// Width of the globally pooled feature vector of the ImageNet
    /// architecture.
    pub fn reference_feature_dim(self) -> usize {
        match self {
            BackboneName::Xception => 2048,
            BackboneName::InceptionResnetV2 => 1536,
            BackboneName::Resnet50 => 2048,
            BackboneName::EfficientnetB2 => 1408,
            BackboneName::Densenet121 => 1024,
        }
    }
}

impl fmt::Display for BackboneName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackboneName {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "xception" => Ok(BackboneName::Xception),
            "inception_resnet_v2" | "inception_v4" => Ok(BackboneName::InceptionResnetV2),
            "resnet50" => Ok(BackboneName::Resnet50),
            "efficientnet_b2" => Ok(BackboneName::EfficientnetB2),
            "densenet121" => Ok(BackboneName::Densenet121),
            _ => Err(ModelError::UnknownBackbone(s.to_owned())),
        }
    }
}

/// Width divisor applied to reference feature widths in the desk profile.
pub const DESK_WIDTH_DIVISOR: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub name: BackboneName,
    pub feature_dim: usize,
    pub pretrained: bool,
}

impl BackboneSpec {
    /// Full-width spec expecting pretrained weights.
    pub fn reference(name: BackboneName) -> Self {
        BackboneSpec {
            name,
            feature_dim: name.reference_feature_dim(),
            pretrained: true,
        }
    }

    /// Reduced-width, randomly initialised spec for desk-scale runs.
    pub fn desk(name: BackboneName) -> Self {
        BackboneSpec {
            name,
            feature_dim: name.reference_feature_dim() / DESK_WIDTH_DIVISOR,
            pretrained: false,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.feature_dim < 2 {
            return Err(ModelError::InvalidSpec(format!(
                "feature_dim must be at least 2, got {}",
                self.feature_dim
            )));
        }
        Ok(())
    }
}

/// Adapter contract for a backbone: a `ModelInput` goes in, a pooled
/// `feature_dim` vector comes out, and gradients flow back through it.
pub trait FeatureExtractor: Clone + Send + Sync {
    type Cache;

    fn feature_dim(&self) -> usize;
    fn input_size(&self) -> usize;
    fn extract(&self, input: &ModelInput) -> Result<(Vec<f64>, Self::Cache), ModelError>;
    /// Accumulates into `grads`, which is laid out like [`FeatureExtractor::params`].
    fn backprop(&self, cache: &Self::Cache, grad_features: &[f64], grads: &mut [Vec<f64>]);
    fn params(&self) -> Vec<&[f64]>;
    fn params_mut(&mut self) -> Vec<&mut Vec<f64>>;
}

/// Grid the stem average-pools every input down to.
pub const STEM_GRID: usize = 32;
const WIDTHS: [usize; 3] = [8, 16, 32];

/// Small trainable CNN standing in for a named architecture: average-pool
/// stem to 32x32, three stride-2 3x3 conv + ReLU blocks, global average
/// pooling, then a dense + ReLU projection to `feature_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompactCnn {
    input_size: usize,
    convs: [Conv3x3; 3],
    proj: Dense,
}

#[derive(Debug, Clone)]
pub struct CompactCache {
    cols: [Array2<f64>; 3],
    pre: [Vec<f64>; 3],
    pooled: Vec<f64>,
    proj_pre: Vec<f64>,
}

impl CompactCnn {
    pub fn new<R: Rng + ?Sized>(feature_dim: usize, input_size: usize, rng: &mut R) -> Result<Self, ModelError> {
        if input_size < STEM_GRID || !input_size.is_multiple_of(STEM_GRID) {
            return Err(ModelError::InvalidSpec(format!(
                "input size must be a positive multiple of {STEM_GRID}, got {input_size}"
            )));
        }
        let convs = [
            Conv3x3::he(3, WIDTHS[0], rng),
            Conv3x3::he(WIDTHS[0], WIDTHS[1], rng),
            Conv3x3::he(WIDTHS[1], WIDTHS[2], rng),
        ];
        Ok(CompactCnn {
            input_size,
            convs,
            proj: Dense::he(WIDTHS[2], feature_dim, rng),
        })
    }

    fn stem(&self, input: &ModelInput) -> Vec<f64> {
        let f = self.input_size / STEM_GRID;
        let norm = 1.0 / (f * f) as f64;
        let px = input.pixels();
        let mut out = vec![0.0; 3 * STEM_GRID * STEM_GRID];
        for c in 0..3 {
            let plane = px.index_axis(ndarray::Axis(0), c);
            for y in 0..self.input_size {
                let row = plane.row(y);
                let oy = y / f;
                for (x, &v) in row.iter().enumerate() {
                    out[(c * STEM_GRID + oy) * STEM_GRID + x / f] += f64::from(v);
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= norm);
        out
    }
}

impl FeatureExtractor for CompactCnn {
    type Cache = CompactCache;

    fn feature_dim(&self) -> usize {
        self.proj.out_dim
    }

    fn input_size(&self) -> usize {
        self.input_size
    }

    fn extract(&self, input: &ModelInput) -> Result<(Vec<f64>, CompactCache), ModelError> {
        if input.size() != self.input_size {
            return Err(ModelError::ShapeMismatch {
                expected: self.input_size,
                found: input.size(),
            });
        }
        let mut x = self.stem(input);
        let mut n = STEM_GRID;
        let mut cols: Vec<Array2<f64>> = Vec::with_capacity(3);
        let mut pre: Vec<Vec<f64>> = Vec::with_capacity(3);
        for conv in &self.convs {
            let c = conv.im2col(&x, n);
            let z = conv.forward_cols(&c);
            x = z.clone();
            relu_in_place(&mut x);
            cols.push(c);
            pre.push(z);
            n = conv_out(n);
        }
        let area = (n * n) as f64;
        let pooled: Vec<f64> = x.chunks_exact(n * n).map(|ch| ch.iter().sum::<f64>() / area).collect();
        let proj_pre = self.proj.forward(&pooled);
        let mut features = proj_pre.clone();
        relu_in_place(&mut features);
        let [c0, c1, c2]: [Array2<f64>; 3] = cols.try_into().expect("three blocks");
        let [p0, p1, p2]: [Vec<f64>; 3] = pre.try_into().expect("three blocks");
        Ok((
            features,
            CompactCache {
                cols: [c0, c1, c2],
                pre: [p0, p1, p2],
                pooled,
                proj_pre,
            },
        ))
    }

    fn backprop(&self, cache: &CompactCache, grad_features: &[f64], grads: &mut [Vec<f64>]) {
        let mut g = grad_features.to_vec();
        relu_backward(&cache.proj_pre, &mut g);
        let (conv_grads, proj_grads) = grads.split_at_mut(6);
        let [pw, pb] = proj_grads else { unreachable!("proj has weight and bias") };
        let dpooled = self.proj.backward(&cache.pooled, &g, pw, pb);

        // spatial size at the output of each block
        let mut sizes = [0usize; 4];
        sizes[0] = STEM_GRID;
        for i in 0..3 {
            sizes[i + 1] = conv_out(sizes[i]);
        }
        let area = sizes[3] * sizes[3];
        let mut dy: Vec<f64> = dpooled
            .iter()
            .flat_map(|&d| std::iter::repeat_n(d / area as f64, area))
            .collect();
        for i in (0..3).rev() {
            relu_backward(&cache.pre[i], &mut dy);
            let (w, rest) = conv_grads[2 * i..].split_first_mut().expect("weight grad");
            let b = &mut rest[0];
            let input_size = (i > 0).then_some(sizes[i]);
            match self.convs[i].backward(&cache.cols[i], &dy, w, b, input_size) {
                Some(dx) => dy = dx,
                None => break,
            }
        }
    }

    fn params(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = Vec::with_capacity(8);
        for c in &self.convs {
            v.push(&c.weight);
            v.push(&c.bias);
        }
        v.push(&self.proj.weight);
        v.push(&self.proj.bias);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut v: Vec<&mut Vec<f64>> = Vec::with_capacity(8);
        for c in &mut self.convs {
            v.push(&mut c.weight);
            v.push(&mut c.bias);
        }
        v.push(&mut self.proj.weight);
        v.push(&mut self.proj.bias);
        v
    }
}

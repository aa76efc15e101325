//! Geometric augmentation and offline minority-class balancing.
//!
//! A transform is applied about the image centre in a fixed order: rotate,
//! then zoom, then translate. Pixels that map from outside the source frame
//! are filled with 0.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{ImageRecord, Label, Manifest};
use crate::preprocess::GrayscaleImage;

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("augmentation parameter {field} = {value} outside [{lo}, {hi}]")]
    ParamsOutOfRange {
        field: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("manifest contains only one class")]
    SingleClassManifest,
    #[error("balancing requires original records, {0} is augmented")]
    AugmentedInput(String),
    #[error("invalid augmentation ranges: {0}")]
    InvalidRanges(String),
}

/// Closed sampling ranges for each transform parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentRanges {
    pub zoom: [f64; 2],
    /// Maximum absolute shift as a fraction of width (x) and height (y).
    pub translate_frac: f64,
    /// Maximum absolute rotation in degrees.
    pub rotation_deg: f64,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        AugmentRanges {
            zoom: [0.95, 1.05],
            translate_frac: 0.05,
            rotation_deg: 15.0,
        }
    }
}

impl AugmentRanges {
    /// Ranges must be non-empty and nested inside the default ranges.
    pub fn validate(&self) -> Result<(), AugmentError> {
        let d = AugmentRanges::default();
        let bad = |m: String| Err(AugmentError::InvalidRanges(m));
        if !(self.zoom[0] <= self.zoom[1]) || self.zoom[0] < d.zoom[0] || self.zoom[1] > d.zoom[1] {
            return bad(format!("zoom {:?} must be a sub-range of {:?}", self.zoom, d.zoom));
        }
        if !(0.0..=d.translate_frac).contains(&self.translate_frac) {
            return bad(format!("translate_frac {} must lie in [0, {}]", self.translate_frac, d.translate_frac));
        }
        if !(0.0..=d.rotation_deg).contains(&self.rotation_deg) {
            return bad(format!("rotation_deg {} must lie in [0, {}]", self.rotation_deg, d.rotation_deg));
        }
        Ok(())
    }

    /// Draws each parameter independently and uniformly from its range.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> AugmentParams {
        let uniform = |rng: &mut R, lo: f64, hi: f64| if lo == hi { lo } else { rng.random_range(lo..=hi) };
        let t = self.translate_frac;
        let r = self.rotation_deg;
        AugmentParams {
            zoom: uniform(rng, self.zoom[0], self.zoom[1]),
            tx_frac: uniform(rng, -t, t),
            ty_frac: uniform(rng, -t, t),
            rotation_deg: uniform(rng, -r, r),
        }
    }
}

/// One sampled geometric transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub zoom: f64,
    pub tx_frac: f64,
    pub ty_frac: f64,
    /// Counter-clockwise as displayed (y axis pointing down).
    pub rotation_deg: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        zoom: 1.0,
        tx_frac: 0.0,
        ty_frac: 0.0,
        rotation_deg: 0.0,
    };

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let d = AugmentRanges::default();
        let t = d.translate_frac;
        let r = d.rotation_deg;
        let checks = [
            ("zoom", self.zoom, d.zoom[0], d.zoom[1]),
            ("tx_frac", self.tx_frac, -t, t),
            ("ty_frac", self.ty_frac, -t, t),
            ("rotation_deg", self.rotation_deg, -r, r),
        ];
        for (field, value, lo, hi) in checks {
            if !(lo..=hi).contains(&value) {
                return Err(AugmentError::ParamsOutOfRange { field, value, lo, hi });
            }
        }
        Ok(())
    }

    /// Where a source point `(x, y)` lands in a `width x height` output.
    pub fn map_point(&self, x: f64, y: f64, width: usize, height: usize) -> (f64, f64) {
        let (cx, cy) = centre(width, height);
        let (sin, cos) = self.rotation_deg.to_radians().sin_cos();
        let (dx, dy) = (x - cx, y - cy);
        let rx = cos * dx + sin * dy;
        let ry = -sin * dx + cos * dy;
        (
            cx + self.zoom * rx + self.tx_frac * width as f64,
            cy + self.zoom * ry + self.ty_frac * height as f64,
        )
    }

    fn inverse_point(&self, x: f64, y: f64, width: usize, height: usize) -> (f64, f64) {
        let (cx, cy) = centre(width, height);
        let (sin, cos) = self.rotation_deg.to_radians().sin_cos();
        let qx = (x - cx - self.tx_frac * width as f64) / self.zoom;
        let qy = (y - cy - self.ty_frac * height as f64) / self.zoom;
        (cx + cos * qx - sin * qy, cy + sin * qx + cos * qy)
    }
}

fn centre(width: usize, height: usize) -> (f64, f64) {
    ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0)
}

/// Uniform draw over the default ranges.
pub fn sample_params<R: Rng + ?Sized>(rng: &mut R) -> AugmentParams {
    AugmentRanges::default().sample(rng)
}

/// Applies `p` with bilinear resampling and zero fill. Output has the input's
/// dimensions; identity parameters return the input unchanged.
pub fn apply(img: &GrayscaleImage, p: &AugmentParams) -> Result<GrayscaleImage, AugmentError> {
    p.validate()?;
    if p.is_identity() {
        return Ok(img.clone());
    }
    let (h, w) = (img.height(), img.width());
    let px = Array2::from_shape_fn((h, w), |(y, x)| {
        let (sx, sy) = p.inverse_point(x as f64, y as f64, w, h);
        img.sample_bilinear(sy, sx).unwrap_or(0.0) as f32
    });
    Ok(GrayscaleImage::new(px).expect("resampled image is finite and non-empty"))
}

/// One planned augmented copy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceAddition {
    pub parent_id: String,
    pub params: AugmentParams,
    pub new_id: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BalancePlan {
    pub additions: Vec<BalanceAddition>,
}

impl BalancePlan {
    pub fn is_empty(&self) -> bool {
        self.additions.is_empty()
    }

    pub fn len(&self) -> usize {
        self.additions.len()
    }

    /// Manifest rows for the planned copies. Each image is written beside its
    /// parent as `<new_id>.png`.
    pub fn records(&self, manifest: &Manifest) -> Vec<ImageRecord> {
        self.additions
            .iter()
            .map(|a| {
                let parent = manifest.get(&a.parent_id).expect("plan built from this manifest");
                let dir = parent.path.parent().map(Path::to_path_buf).unwrap_or_default();
                ImageRecord {
                    image_id: a.new_id.clone(),
                    patient_id: parent.patient_id.clone(),
                    label: parent.label,
                    source: parent.source,
                    path: dir.join(format!("{}.png", a.new_id)),
                    is_augmented: true,
                    augment_parent: Some(a.parent_id.clone()),
                }
            })
            .collect()
    }

    /// Like [`BalancePlan::records`] but with paths under `dir`.
    pub fn records_in(&self, manifest: &Manifest, dir: &Path) -> Vec<ImageRecord> {
        let mut out = self.records(manifest);
        for r in &mut out {
            r.path = dir.join(PathBuf::from(format!("{}.png", r.image_id)));
        }
        out
    }
}

/// Plans one augmented copy per minority-class image, capped so the
/// minority never outgrows the majority: `min(minority, majority - minority)`
/// copies. When the cap bites, parents are a random subset (kept in manifest
/// order). New ids are `<parent>_<id_suffix>`.
pub fn plan_balancing<R: Rng + ?Sized>(
    manifest: &Manifest,
    ranges: &AugmentRanges,
    id_suffix: &str,
    rng: &mut R,
) -> Result<BalancePlan, AugmentError> {
    if let Some(r) = manifest.records().iter().find(|r| r.is_augmented) {
        return Err(AugmentError::AugmentedInput(r.image_id.clone()));
    }
    let count = |l: Label| manifest.records().iter().filter(|r| r.label == l).count();
    let (n_pos, n_neg) = (count(Label::Positive), count(Label::Negative));
    if n_pos == 0 || n_neg == 0 {
        return Err(AugmentError::SingleClassManifest);
    }
    if n_pos == n_neg {
        return Ok(BalancePlan::default());
    }
    let (minority, n_min, n_maj) = if n_pos < n_neg {
        (Label::Positive, n_pos, n_neg)
    } else {
        (Label::Negative, n_neg, n_pos)
    };
    let n_add = n_min.min(n_maj - n_min);
    let mut chosen: Vec<usize> = manifest
        .records()
        .iter()
        .enumerate()
        .filter(|(_, r)| r.label == minority)
        .map(|(i, _)| i)
        .collect();
    if n_add < chosen.len() {
        chosen.shuffle(rng);
        chosen.truncate(n_add);
        chosen.sort_unstable();
    }
    let additions = chosen
        .into_iter()
        .map(|i| {
            let parent = &manifest.records()[i];
            BalanceAddition {
                parent_id: parent.image_id.clone(),
                params: ranges.sample(rng),
                new_id: format!("{}_{id_suffix}", parent.image_id),
            }
        })
        .collect();
    Ok(BalancePlan { additions })
}

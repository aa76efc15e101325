//! Dataset manifests and the synthetic stand-in dataset.
//!
//! A manifest is a flat CSV file with the header
//! `image_id,patient_id,label,source,path,is_augmented,augment_parent`.
//! Paths are stored as written and resolved against the manifest's directory.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preprocess::{self, GrayscaleImage};

pub const MANIFEST_HEADER: [&str; 7] = [
    "image_id",
    "patient_id",
    "label",
    "source",
    "path",
    "is_augmented",
    "augment_parent",
];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("record {image_id}: file {path} does not exist")]
    MissingFile { image_id: String, path: PathBuf },
    #[error("duplicate image_id {0}")]
    DuplicateId(String),
    #[error("patient {0} has records labelled both positive and negative")]
    InconsistentPatientLabel(String),
    #[error("malformed manifest row {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("record {image_id}: invalid augmentation lineage: {reason}")]
    InvalidLineage { image_id: String, reason: String },
    #[error("invalid synthetic dataset config: {0}")]
    InvalidConfig(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] preprocess::PreprocessError),
}

impl IngestError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        IngestError::Io {
            path: path.into(),
            source,
        }
    }
}

/// Diagnosis label. `Positive` is endometriosis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    /// 1 for positive, 0 for negative.
    pub fn target(self) -> u8 {
        match self {
            Label::Positive => 1,
            Label::Negative => 0,
        }
    }

    pub fn from_target(t: u8) -> Option<Self> {
        match t {
            1 => Some(Label::Positive),
            0 => Some(Label::Negative),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Positive => "positive",
            Label::Negative => "negative",
        }
    }

    pub fn other(self) -> Self {
        match self {
            Label::Positive => Label::Negative,
            Label::Negative => Label::Positive,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "positive" => Ok(Label::Positive),
            "negative" => Ok(Label::Negative),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Still,
    VideoFrame,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Still => "still",
            Source::VideoFrame => "video_frame",
        }
    }
}

impl FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "still" => Ok(Source::Still),
            "video_frame" => Ok(Source::VideoFrame),
            other => Err(format!("unknown source {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    pub image_id: String,
    pub patient_id: String,
    pub label: Label,
    pub source: Source,
    pub path: PathBuf,
    pub is_augmented: bool,
    pub augment_parent: Option<String>,
}

impl ImageRecord {
    pub fn original(
        image_id: impl Into<String>,
        patient_id: impl Into<String>,
        label: Label,
        path: impl Into<PathBuf>,
    ) -> Self {
        ImageRecord {
            image_id: image_id.into(),
            patient_id: patient_id.into(),
            label,
            source: Source::Still,
            path: path.into(),
            is_augmented: false,
            augment_parent: None,
        }
    }
}

/// A validated, ordered collection of image records.
///
/// Construction checks id uniqueness, per-patient label consistency and
/// augmentation lineage. Once built a manifest is immutable.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    records: Vec<ImageRecord>,
    patients: BTreeMap<String, Vec<usize>>,
    index: HashMap<String, usize>,
    base_dir: PathBuf,
}

impl Manifest {
    pub fn new(records: Vec<ImageRecord>) -> Result<Self, IngestError> {
        Self::with_base_dir(records, PathBuf::new())
    }

    pub fn with_base_dir(
        records: Vec<ImageRecord>,
        base_dir: impl Into<PathBuf>,
    ) -> Result<Self, IngestError> {
        let mut index = HashMap::with_capacity(records.len());
        let mut patients: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut patient_label: HashMap<&str, Label> = HashMap::new();
        for (i, r) in records.iter().enumerate() {
            if index.insert(r.image_id.clone(), i).is_some() {
                return Err(IngestError::DuplicateId(r.image_id.clone()));
            }
            match patient_label.get(r.patient_id.as_str()) {
                Some(&l) if l != r.label => {
                    return Err(IngestError::InconsistentPatientLabel(r.patient_id.clone()))
                }
                Some(_) => {}
                None => {
                    patient_label.insert(&r.patient_id, r.label);
                }
            }
            patients.entry(r.patient_id.clone()).or_default().push(i);
        }
        for r in &records {
            check_lineage(r, &records, &index)?;
        }
        Ok(Manifest {
            records,
            patients,
            index,
            base_dir: base_dir.into(),
        })
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Option<&ImageRecord> {
        self.index.get(image_id).map(|&i| &self.records[i])
    }

    /// patient_id -> indices into [`Manifest::records`], in record order.
    pub fn patients(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.patients
    }

    pub fn patient_label(&self, patient_id: &str) -> Option<Label> {
        self.patients
            .get(patient_id)
            .and_then(|ix| ix.first())
            .map(|&i| self.records[i].label)
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    /// Filesystem location of a record's image.
    pub fn resolve(&self, record: &ImageRecord) -> PathBuf {
        if record.path.is_absolute() {
            record.path.clone()
        } else {
            self.base_dir.join(&record.path)
        }
    }

    /// New manifest with only the records whose id satisfies `keep`.
    pub fn filter(&self, mut keep: impl FnMut(&ImageRecord) -> bool) -> Result<Self, IngestError> {
        let records = self.records.iter().filter(|r| keep(r)).cloned().collect();
        Manifest::with_base_dir(records, self.base_dir.clone())
    }

    /// New manifest with `extra` appended.
    pub fn extended(&self, extra: impl IntoIterator<Item = ImageRecord>) -> Result<Self, IngestError> {
        let mut records = self.records.clone();
        records.extend(extra);
        Manifest::with_base_dir(records, self.base_dir.clone())
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        w.write_record(MANIFEST_HEADER).expect("in-memory write");
        for r in &self.records {
            let path = r.path.to_string_lossy();
            w.write_record([
                r.image_id.as_str(),
                r.patient_id.as_str(),
                r.label.as_str(),
                r.source.as_str(),
                path.as_ref(),
                if r.is_augmented { "1" } else { "0" },
                r.augment_parent.as_deref().unwrap_or(""),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
    }

    /// Parses manifest text without touching the filesystem. Lines starting
    /// with `#` are ignored.
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self, IngestError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let header = reader.headers().map_err(|e| IngestError::MalformedRow {
            line: 1,
            reason: e.to_string(),
        })?;
        if header.iter().map(str::trim).ne(MANIFEST_HEADER.iter().copied()) {
            return Err(IngestError::MalformedRow {
                line: 1,
                reason: format!("expected header {}", MANIFEST_HEADER.join(",")),
            });
        }
        let mut records = Vec::new();
        for (i, row) in reader.records().enumerate() {
            let line = i + 2;
            let row = row.map_err(|e| IngestError::MalformedRow {
                line,
                reason: e.to_string(),
            })?;
            records.push(parse_row(&row, line)?);
        }
        Manifest::with_base_dir(records, base_dir)
    }
}

fn parse_row(row: &csv::StringRecord, line: usize) -> Result<ImageRecord, IngestError> {
    let bad = |reason: String| IngestError::MalformedRow { line, reason };
    if row.len() != MANIFEST_HEADER.len() {
        return Err(bad(format!("expected 7 columns, found {}", row.len())));
    }
    let field = |i: usize| row[i].trim();
    if field(0).is_empty() {
        return Err(bad("empty image_id".into()));
    }
    if field(1).is_empty() {
        return Err(bad("empty patient_id".into()));
    }
    let label = field(2).parse::<Label>().map_err(bad)?;
    let source = field(3).parse::<Source>().map_err(bad)?;
    if field(4).is_empty() {
        return Err(bad("empty path".into()));
    }
    let is_augmented = match field(5) {
        "0" => false,
        "1" => true,
        other => return Err(bad(format!("is_augmented must be 0 or 1, found {other:?}"))),
    };
    let augment_parent = Some(field(6)).filter(|s| !s.is_empty()).map(str::to_owned);
    Ok(ImageRecord {
        image_id: field(0).to_owned(),
        patient_id: field(1).to_owned(),
        label,
        source,
        path: PathBuf::from(field(4)),
        is_augmented,
        augment_parent,
    })
}

fn check_lineage(
    r: &ImageRecord,
    records: &[ImageRecord],
    index: &HashMap<String, usize>,
) -> Result<(), IngestError> {
    let err = |reason: &str| IngestError::InvalidLineage {
        image_id: r.image_id.clone(),
        reason: reason.to_owned(),
    };
    match (&r.augment_parent, r.is_augmented) {
        (None, false) => Ok(()),
        (None, true) => Err(err("augmented record without augment_parent")),
        (Some(_), false) => Err(err("augment_parent set on an original record")),
        (Some(parent), true) => {
            let p = index
                .get(parent)
                .map(|&i| &records[i])
                .ok_or_else(|| err("augment_parent does not exist"))?;
            if p.is_augmented {
                Err(err("augment_parent is itself augmented"))
            } else if p.patient_id != r.patient_id || p.label != r.label {
                Err(err("patient or label differs from parent"))
            } else {
                Ok(())
            }
        }
    }
}

/// Reads and validates a manifest; every referenced image must exist.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest, IngestError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| IngestError::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest = Manifest::parse(&text, base)?;
    for r in manifest.records() {
        let p = manifest.resolve(r);
        if !p.is_file() {
            return Err(IngestError::MissingFile {
                image_id: r.image_id.clone(),
                path: p,
            });
        }
    }
    Ok(manifest)
}

pub fn save_manifest(manifest: &Manifest, path: impl AsRef<Path>) -> Result<(), IngestError> {
    let path = path.as_ref();
    fs::write(path, manifest.to_csv()).map_err(|e| IngestError::io(path, e))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub positive: usize,
    pub negative: usize,
}

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.positive + self.negative
    }

    pub fn get(&self, label: Label) -> usize {
        match label {
            Label::Positive => self.positive,
            Label::Negative => self.negative,
        }
    }

    fn bump(&mut self, label: Label) {
        match label {
            Label::Positive => self.positive += 1,
            Label::Negative => self.negative += 1,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n_images_per_class: ClassCounts,
    pub n_patients_per_class: ClassCounts,
    pub n_augmented: usize,
    pub n_video_frames: usize,
}

pub fn summarize(manifest: &Manifest) -> DatasetSummary {
    let mut s = DatasetSummary::default();
    for r in manifest.records() {
        s.n_images_per_class.bump(r.label);
        s.n_augmented += usize::from(r.is_augmented);
        s.n_video_frames += usize::from(r.source == Source::VideoFrame);
    }
    for ix in manifest.patients().values() {
        s.n_patients_per_class.bump(manifest.records()[ix[0]].label);
    }
    s
}

/// Parameters of the synthetic dataset generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_patients_per_class: usize,
    pub images_per_patient: usize,
    /// Image height; width is `image_size + image_size / 4` so that the
    /// centred crop has something to remove.
    pub image_size: usize,
    /// 0 gives identical class distributions, 1 the largest class gap.
    pub class_texture_separation: f64,
    pub seed: u64,
    /// Video frames per patient, written to a second manifest; 0 disables.
    #[serde(default)]
    pub video_frames_per_patient: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_patients_per_class: 20,
            images_per_patient: 20,
            image_size: 128,
            class_texture_separation: 1.0,
            seed: 0,
            video_frames_per_patient: 0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<(), IngestError> {
        let bad = |m: &str| Err(IngestError::InvalidConfig(m.to_owned()));
        if self.n_patients_per_class < 1 {
            return bad("n_patients_per_class must be at least 1");
        }
        if self.images_per_patient < 1 {
            return bad("images_per_patient must be at least 1");
        }
        if self.image_size < 8 {
            return bad("image_size must be at least 8");
        }
        if !(0.0..=1.0).contains(&self.class_texture_separation) {
            return bad("class_texture_separation must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Manifests written by [`generate_synthetic`].
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub stills: Manifest,
    pub video: Option<Manifest>,
}

const BASE_ECHO: f64 = 100.0;
const CLASS_SHIFT: f64 = 20.0;
const PATIENT_SD: f64 = 1.5;
const IMAGE_SD: f64 = 6.0;
const SPECKLE_SD: f64 = 0.2;
const SPECKLE_SHIFT: f64 = 0.08;

/// Writes a deterministic synthetic dataset under `out_dir`.
///
/// Each image has a black band along the top edge and a single saturated
/// marker pixel near the bottom centre, so its intensity range is exactly
/// 0..=255. The tissue region is a speckled field whose mean and speckle
/// contrast shift with the class by `class_texture_separation`. Every patient
/// draws a persistent offset, and every image a further jitter.
///
/// Layout: `images/*.png`, `manifest.csv`, and `manifest_video.csv` when
/// video frames are requested.
pub fn generate_synthetic(config: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<SynthDataset, IngestError> {
    config.validate()?;
    let out_dir = out_dir.as_ref();
    let img_dir = out_dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| IngestError::io(&img_dir, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let patient_noise = Normal::new(0.0, PATIENT_SD).expect("valid sd");
    let image_noise = Normal::new(0.0, IMAGE_SD).expect("valid sd");

    let mut stills = Vec::new();
    let mut frames = Vec::new();
    for label in [Label::Positive, Label::Negative] {
        let sign = if label == Label::Positive { 1.0 } else { -1.0 };
        let tag = if label == Label::Positive { "pos" } else { "neg" };
        for p in 0..config.n_patients_per_class {
            let patient_id = format!("{tag}{p:03}");
            let patient_offset = patient_noise.sample(&mut rng);
            let mean = BASE_ECHO + sign * CLASS_SHIFT * config.class_texture_separation + patient_offset;
            let speckle = SPECKLE_SD + sign * SPECKLE_SHIFT * config.class_texture_separation;
            let emit = |source: Source, n: usize, out: &mut Vec<ImageRecord>, rng: &mut ChaCha8Rng| {
                for i in 0..n {
                    let suffix = if source == Source::Still { "s" } else { "v" };
                    let image_id = format!("{patient_id}_{suffix}{i:03}");
                    let jitter = image_noise.sample(rng);
                    let img = synth_image(config.image_size, mean + jitter, speckle, rng);
                    let rel = PathBuf::from("images").join(format!("{image_id}.png"));
                    preprocess::save_png(&img, out_dir.join(&rel))?;
                    out.push(ImageRecord {
                        image_id,
                        patient_id: patient_id.clone(),
                        label,
                        source,
                        path: rel,
                        is_augmented: false,
                        augment_parent: None,
                    });
                }
                Ok::<_, IngestError>(())
            };
            emit(Source::Still, config.images_per_patient, &mut stills, &mut rng)?;
            emit(Source::VideoFrame, config.video_frames_per_patient, &mut frames, &mut rng)?;
        }
    }

    let stills = Manifest::with_base_dir(stills, out_dir)?;
    save_manifest(&stills, out_dir.join("manifest.csv"))?;
    let video = if frames.is_empty() {
        None
    } else {
        let m = Manifest::with_base_dir(frames, out_dir)?;
        save_manifest(&m, out_dir.join("manifest_video.csv"))?;
        Some(m)
    };
    Ok(SynthDataset { stills, video })
}

fn synth_image(height: usize, mean: f64, speckle: f64, rng: &mut ChaCha8Rng) -> GrayscaleImage {
    let width = height + height / 4;
    let band = (height / 16).max(1);
    let unit = Normal::new(0.0, 1.0).expect("valid sd");
    let mut px = Array2::<f32>::zeros((height, width));
    for ((y, _x), v) in px.indexed_iter_mut() {
        if y < band {
            continue;
        }
        let s: f64 = unit.sample(rng);
        let value = mean * (1.0 + speckle * s) + rng.random_range(-2.0..2.0);
        *v = value.clamp(1.0, 254.0).round() as f32;
    }
    px[[height - 2, width / 2]] = 255.0;
    GrayscaleImage::new(px).expect("non-empty finite image")
}

//! sonoclass: reproducible binary classification of grayscale ultrasound images.
//!
//! The crate is organised as a chain of stages, each usable on its own:
//!
//! - [`ingest`]: manifests mapping images to patients and labels, plus a
//!   synthetic dataset generator for desk-scale runs.
//! - [`preprocess`]: intensity rescale, centred square crop, bilinear resize
//!   and conversion to three-channel model input.
//! - [`augment`]: geometric augmentation and minority-class balancing plans.
//! - [`cv_split`]: patient-grouped, label-stratified k-fold plans with
//!   leakage verification.
//! - [`model_zoo`]: backbone adapters and the two-layer classification head.
//! - [`trainer`]: batch-balanced BCE, AdamW, plateau learning-rate schedule
//!   and checkpointing.
//! - [`eval_report`]: ROC AUC, confusion matrices, fold aggregation, paired
//!   t-tests and report rendering.
//! - [`pipeline`]: configuration-driven stages (`prepare`, `split`, `train`,
//!   `evaluate`, `report`) used by the command-line front end.

pub mod augment;
pub mod cv_split;
mod error;
pub mod eval_report;
pub mod ingest;
pub mod model_zoo;
pub mod pipeline;
pub mod preprocess;
pub mod trainer;

pub use augment::{AugmentParams, AugmentRanges, BalancePlan};
pub use cv_split::{FoldPlan, LeakageReport, Partition};
pub use error::Error;
pub use eval_report::{AggregateReport, ConfusionMatrix, FoldMetrics, ScoredSet, TestSet};
pub use ingest::{DatasetSummary, ImageRecord, Label, Manifest, Source, SynthConfig};
pub use model_zoo::{BackboneName, BackboneSpec, ClassifierHead, Mode, Model};
pub use pipeline::{Profile, RunConfig};
pub use preprocess::{GrayscaleImage, ModelInput};
pub use trainer::{TrainConfig, TrainState};

pub type Result<T, E = Error> = std::result::Result<T, E>;

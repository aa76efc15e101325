use std::path::{Path, PathBuf};

use crate::eval_report::TestSet;
use crate::model_zoo::BackboneName;

/// Where each stage reads and writes under the output directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn prepared_dir(&self) -> PathBuf {
        self.root.join("prepared")
    }

    pub fn prepared_manifest(&self) -> PathBuf {
        self.prepared_dir().join("manifest.csv")
    }

    pub fn prepared_test2_manifest(&self) -> PathBuf {
        self.prepared_dir().join("manifest_test2.csv")
    }

    pub fn provenance(&self) -> PathBuf {
        self.prepared_dir().join("provenance.json")
    }

    pub fn plan(&self) -> PathBuf {
        self.root.join("split").join("folds.csv")
    }

    pub fn augmented_dir(&self, fold: usize) -> PathBuf {
        self.root.join("augmented").join(format!("fold{fold}"))
    }

    pub fn augmented_manifest(&self, fold: usize) -> PathBuf {
        self.augmented_dir(fold).join("manifest.csv")
    }

    pub fn model_dir(&self, backbone: BackboneName) -> PathBuf {
        self.root.join("models").join(backbone.as_str())
    }

    pub fn fold_dir(&self, backbone: BackboneName, fold: usize) -> PathBuf {
        self.model_dir(backbone).join(format!("fold{fold}"))
    }

    pub fn train_log(&self, backbone: BackboneName, fold: usize) -> PathBuf {
        self.fold_dir(backbone, fold).join("train_log.csv")
    }

    pub fn best_checkpoint(&self, backbone: BackboneName, fold: usize) -> PathBuf {
        self.fold_dir(backbone, fold).join("best.ckpt")
    }

    pub fn last_checkpoint(&self, backbone: BackboneName, fold: usize) -> PathBuf {
        self.fold_dir(backbone, fold).join("last.ckpt")
    }

    pub fn metrics(&self, backbone: BackboneName, fold: usize, test: TestSet) -> PathBuf {
        self.model_dir(backbone).join("metrics").join(format!("fold{fold}_{test}.json"))
    }

    pub fn scores(&self, backbone: BackboneName, fold: usize, test: TestSet) -> PathBuf {
        self.model_dir(backbone).join("scores").join(format!("fold{fold}_{test}.csv"))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
}

//! Patient-grouped, label-stratified k-fold cross-validation plans.
//!
//! Patients (not images) are the unit of assignment. Each class's patients
//! are shuffled by seed and dealt round-robin into `k` groups; fold `i` tests
//! on group `i`, validates on group `i + 1 (mod k)` and trains on the rest.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::BalancePlan;
use crate::ingest::{Label, Manifest};

#[derive(Debug, Error, PartialEq)]
pub enum SplitError {
    #[error("need at least {k} patients per class, {label} has {found}")]
    TooFewPatients { k: usize, label: Label, found: usize },
    #[error("manifest contains only one class")]
    SingleClassManifest,
    #[error("k must be at least 3 to keep train, validation and test disjoint, got {0}")]
    InvalidK(usize),
    #[error("record {0} is augmented; folds are built from original images only")]
    AugmentedInput(String),
    #[error("fold {fold}: augmentation parent {parent} is not in that fold's training partition")]
    AugmentSourceOutsideTrain { fold: usize, parent: String },
    #[error("expected {expected} balance plans, got {found}")]
    PlanCountMismatch { expected: usize, found: usize },
    #[error("fold plan line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Train, Partition::Val, Partition::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Test => "test",
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Partition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Partition::Train),
            "val" => Ok(Partition::Val),
            "test" => Ok(Partition::Test),
            other => Err(format!("unknown partition {other:?}")),
        }
    }
}

/// One fold's view of the data.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Fold {
    pub assignments: BTreeMap<Partition, BTreeSet<String>>,
    pub patient_partition: BTreeMap<String, Partition>,
}

impl Fold {
    pub fn ids(&self, partition: Partition) -> &BTreeSet<String> {
        static EMPTY: BTreeSet<String> = BTreeSet::new();
        self.assignments.get(&partition).unwrap_or(&EMPTY)
    }

    pub fn partition_of(&self, image_id: &str) -> Option<Partition> {
        Partition::ALL.into_iter().find(|p| self.ids(*p).contains(image_id))
    }

    pub fn patients_in(&self, partition: Partition) -> impl Iterator<Item = &str> {
        self.patient_partition
            .iter()
            .filter(move |(_, p)| **p == partition)
            .map(|(id, _)| id.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub k: usize,
    pub folds: Vec<Fold>,
}

/// Builds a `k`-fold plan. Deterministic in `(manifest, k, seed)`.
pub fn make_folds(manifest: &Manifest, k: usize, seed: u64) -> Result<FoldPlan, SplitError> {
    if k < 3 {
        return Err(SplitError::InvalidK(k));
    }
    if let Some(r) = manifest.records().iter().find(|r| r.is_augmented) {
        return Err(SplitError::AugmentedInput(r.image_id.clone()));
    }
    let mut by_class: BTreeMap<Label, Vec<&str>> = BTreeMap::new();
    for pid in manifest.patients().keys() {
        let label = manifest.patient_label(pid).expect("patient has records");
        by_class.entry(label).or_default().push(pid);
    }
    if by_class.len() < 2 {
        return Err(SplitError::SingleClassManifest);
    }
    for (&label, ps) in &by_class {
        if ps.len() < k {
            return Err(SplitError::TooFewPatients { k, label, found: ps.len() });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // patient -> group; the deal counter runs across both classes so group
    // totals stay within one of each other as well as per-class counts.
    let mut group_of: BTreeMap<&str, usize> = BTreeMap::new();
    let mut deal = 0usize;
    for label in [Label::Positive, Label::Negative] {
        let mut ps = by_class[&label].clone();
        ps.shuffle(&mut rng);
        for p in ps {
            group_of.insert(p, deal % k);
            deal += 1;
        }
    }

    let folds = (0..k)
        .map(|i| {
            let mut fold = Fold::default();
            for p in Partition::ALL {
                fold.assignments.insert(p, BTreeSet::new());
            }
            for (&pid, &g) in &group_of {
                let part = if g == i {
                    Partition::Test
                } else if g == (i + 1) % k {
                    Partition::Val
                } else {
                    Partition::Train
                };
                fold.patient_partition.insert(pid.to_owned(), part);
                let set = fold.assignments.get_mut(&part).expect("all partitions present");
                for &ix in &manifest.patients()[pid] {
                    set.insert(manifest.records()[ix].image_id.clone());
                }
            }
            fold
        })
        .collect();
    Ok(FoldPlan { k, folds })
}

/// Appends each fold's augmented ids to its training partition. `plans[i]`
/// belongs to fold `i` and may only draw parents from that fold's TRAIN.
pub fn attach_training_augmentation(plan: &FoldPlan, plans: &[BalancePlan]) -> Result<FoldPlan, SplitError> {
    if plans.len() != plan.folds.len() {
        return Err(SplitError::PlanCountMismatch {
            expected: plan.folds.len(),
            found: plans.len(),
        });
    }
    let mut out = plan.clone();
    for (i, (fold, bp)) in out.folds.iter_mut().zip(plans).enumerate() {
        let train = fold.assignments.entry(Partition::Train).or_default();
        for a in &bp.additions {
            if !train.contains(&a.parent_id) {
                return Err(SplitError::AugmentSourceOutsideTrain {
                    fold: i,
                    parent: a.parent_id.clone(),
                });
            }
        }
        for a in &bp.additions {
            train.insert(a.new_id.clone());
        }
    }
    Ok(out)
}

/// A patient whose images span more than one partition within a fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Straddle {
    pub fold: usize,
    pub patient_id: String,
    pub partitions: BTreeSet<Partition>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub violations: Vec<Straddle>,
    /// Augmented images found in VAL or TEST.
    pub augmented_in_eval: Vec<String>,
    /// `(fold, image_id)` of original images missing from every partition or
    /// listed in more than one.
    pub coverage_errors: Vec<(usize, String)>,
    /// `(patient_id, times tested)` for patients not tested exactly once.
    pub test_count_errors: Vec<(String, usize)>,
}

impl LeakageReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
            && self.augmented_in_eval.is_empty()
            && self.coverage_errors.is_empty()
            && self.test_count_errors.is_empty()
    }
}

/// Checks every fold for patient straddling and augmented evaluation data,
/// plus coverage of original images and the once-tested rule across folds.
/// Ids absent from `manifest` are reported as coverage errors.
pub fn verify_no_leakage(plan: &FoldPlan, manifest: &Manifest) -> LeakageReport {
    let mut report = LeakageReport::default();
    let mut tested: BTreeMap<&str, usize> = manifest.patients().keys().map(|p| (p.as_str(), 0)).collect();
    for (fi, fold) in plan.folds.iter().enumerate() {
        let mut seen: BTreeMap<&str, BTreeSet<Partition>> = BTreeMap::new();
        let mut placed: BTreeMap<&str, usize> = BTreeMap::new();
        for (&part, ids) in &fold.assignments {
            for id in ids {
                let Some(r) = manifest.get(id) else {
                    report.coverage_errors.push((fi, id.clone()));
                    continue;
                };
                seen.entry(r.patient_id.as_str()).or_default().insert(part);
                if r.is_augmented {
                    if part != Partition::Train {
                        report.augmented_in_eval.push(id.clone());
                    }
                } else {
                    *placed.entry(r.image_id.as_str()).or_default() += 1;
                }
            }
        }
        for (pid, &part) in &fold.patient_partition {
            if let Some(s) = seen.get_mut(pid.as_str()) {
                s.insert(part);
            }
        }
        for (pid, parts) in seen {
            if parts.len() > 1 {
                report.violations.push(Straddle {
                    fold: fi,
                    patient_id: pid.to_owned(),
                    partitions: parts,
                });
            } else if parts.contains(&Partition::Test) {
                *tested.entry(pid).or_default() += 1;
            }
        }
        for r in manifest.records().iter().filter(|r| !r.is_augmented) {
            if placed.get(r.image_id.as_str()).copied().unwrap_or(0) != 1 {
                report.coverage_errors.push((fi, r.image_id.clone()));
            }
        }
    }
    let straddlers: BTreeSet<&str> = report.violations.iter().map(|v| v.patient_id.as_str()).collect();
    report.test_count_errors = tested
        .into_iter()
        .filter(|(p, n)| *n != 1 && !straddlers.contains(p))
        .map(|(p, n)| (p.to_owned(), n))
        .collect();
    report
}

impl FoldPlan {
    /// `fold,partition,image_id` rows, sorted by fold, then partition, then id.
    /// `header_comments` are written first as `# ...` lines.
    pub fn to_text(&self, header_comments: &[String]) -> String {
        let mut out = String::new();
        for c in header_comments {
            out.push_str("# ");
            out.push_str(c);
            out.push('\n');
        }
        out.push_str("fold,partition,image_id\n");
        for (i, fold) in self.folds.iter().enumerate() {
            for p in Partition::ALL {
                for id in fold.ids(p) {
                    out.push_str(&format!("{i},{p},{id}\n"));
                }
            }
        }
        out
    }

    /// Parses [`FoldPlan::to_text`] output. Patient partitions are rebuilt
    /// from `manifest`; a patient that straddles partitions keeps the first
    /// one seen, so [`verify_no_leakage`] still flags it.
    pub fn from_text(text: &str, manifest: &Manifest) -> Result<FoldPlan, SplitError> {
        let mut folds: Vec<Fold> = Vec::new();
        let mut header_seen = false;
        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if !header_seen {
                if line != "fold,partition,image_id" {
                    return Err(SplitError::Parse {
                        line: line_no,
                        reason: "missing header".into(),
                    });
                }
                header_seen = true;
                continue;
            }
            let bad = |reason: String| SplitError::Parse { line: line_no, reason };
            let mut parts = line.splitn(3, ',');
            let (Some(f), Some(p), Some(id)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(bad("expected 3 columns".into()));
            };
            let f: usize = f.parse().map_err(|_| bad(format!("bad fold index {f:?}")))?;
            let p: Partition = p.parse().map_err(bad)?;
            if f > 1024 {
                return Err(bad(format!("fold index {f} too large")));
            }
            while folds.len() <= f {
                let mut fold = Fold::default();
                for part in Partition::ALL {
                    fold.assignments.insert(part, BTreeSet::new());
                }
                folds.push(fold);
            }
            let fold = &mut folds[f];
            fold.assignments.get_mut(&p).expect("present").insert(id.to_owned());
            if let Some(r) = manifest.get(id) {
                fold.patient_partition.entry(r.patient_id.clone()).or_insert(p);
            }
        }
        Ok(FoldPlan { k: folds.len(), folds })
    }
}

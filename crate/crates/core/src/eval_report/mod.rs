//! Classification metrics, fold aggregation, paired t-tests and report
//! rendering.

pub mod render;

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("scored set needs at least one positive and one negative")]
    SingleClassSet,
    #[error("score for {image_id} is {score}, outside [0, 1]")]
    InvalidScore { image_id: String, score: f64 },
    #[error("label for {0} must be 0 or 1")]
    InvalidLabel(String),
    #[error("image {0} scored twice")]
    DuplicateImage(String),
    #[error("scores and labels differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("expected {expected} folds, got {found}")]
    WrongFoldCount { expected: usize, found: usize },
    #[error("paired t-test needs two equal-length samples of size >= 2 (got {0} and {1})")]
    TooFewPairs(usize, usize),
    #[error("nothing to render: {0}")]
    EmptyRequest(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TestSet {
    #[serde(rename = "test1")]
    Test1,
    #[serde(rename = "test2")]
    Test2,
}

impl TestSet {
    pub fn as_str(self) -> &'static str {
        match self {
            TestSet::Test1 => "test1",
            TestSet::Test2 => "test2",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            TestSet::Test1 => "Test-1",
            TestSet::Test2 => "Test-2",
        }
    }
}

impl fmt::Display for TestSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub image_id: String,
    pub score: f64,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub fold: usize,
    pub model: String,
    pub test_set: TestSet,
}

/// One score per image with its ground-truth label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSet {
    pairs: Vec<ScoredPair>,
    pub provenance: Provenance,
}

impl ScoredSet {
    pub fn new(pairs: Vec<ScoredPair>, provenance: Provenance) -> Result<Self, EvalError> {
        let mut seen = HashSet::with_capacity(pairs.len());
        for p in &pairs {
            if !(0.0..=1.0).contains(&p.score) {
                return Err(EvalError::InvalidScore {
                    image_id: p.image_id.clone(),
                    score: p.score,
                });
            }
            if p.label > 1 {
                return Err(EvalError::InvalidLabel(p.image_id.clone()));
            }
            if !seen.insert(p.image_id.as_str()) {
                return Err(EvalError::DuplicateImage(p.image_id.clone()));
            }
        }
        Ok(ScoredSet { pairs, provenance })
    }

    /// Anonymous set from parallel slices; ids are the indices.
    pub fn from_slices(scores: &[f64], labels: &[u8]) -> Result<Self, EvalError> {
        if scores.len() != labels.len() {
            return Err(EvalError::LengthMismatch(scores.len(), labels.len()));
        }
        let pairs = scores
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (&score, &label))| ScoredPair {
                image_id: i.to_string(),
                score,
                label,
            })
            .collect();
        ScoredSet::new(
            pairs,
            Provenance {
                fold: 0,
                model: String::new(),
                test_set: TestSet::Test1,
            },
        )
    }

    pub fn pairs(&self) -> &[ScoredPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.score).collect()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.pairs.iter().map(|p| p.label).collect()
    }
}

/// Rank-statistic (Mann-Whitney) AUC over raw slices. Ties get averaged
/// ranks, so a tied positive/negative pair counts one half.
pub fn auc_from_scores(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch(scores.len(), labels.len()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClassSet);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of (1-based, tie-averaged) ranks of the positives. Ranks are
    // accumulated doubled so every value stays an integer.
    let mut rank_sum_x2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j, average (i + 1 + j) / 2
        let avg_x2 = (i + 1 + j) as u128;
        let pos_in_tie = order[i..j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        rank_sum_x2 += avg_x2 * pos_in_tie;
        i = j;
    }
    let n_pos = n_pos as u128;
    let u_x2 = rank_sum_x2 - n_pos * (n_pos + 1);
    Ok(u_x2 as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

pub fn roc_auc(set: &ScoredSet) -> Result<f64, EvalError> {
    auc_from_scores(&set.scores(), &set.labels())
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub threshold: f64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Element-wise sum; thresholds must agree.
    pub fn merged(&self, other: &ConfusionMatrix) -> ConfusionMatrix {
        debug_assert_eq!(self.threshold, other.threshold);
        ConfusionMatrix {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            tn: self.tn + other.tn,
            fn_: self.fn_ + other.fn_,
            threshold: self.threshold,
        }
    }
}

/// Predicts positive iff `score >= threshold`.
pub fn confusion(set: &ScoredSet, threshold: f64) -> ConfusionMatrix {
    let mut m = ConfusionMatrix {
        tp: 0,
        fp: 0,
        tn: 0,
        fn_: 0,
        threshold,
    };
    for p in set.pairs() {
        match (p.score >= threshold, p.label == 1) {
            (true, true) => m.tp += 1,
            (true, false) => m.fp += 1,
            (false, false) => m.tn += 1,
            (false, true) => m.fn_ += 1,
        }
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UndefinedMetric {
    PositivePrecision,
    PositiveRecall,
    PositiveF1,
    NegativePrecision,
    NegativeRecall,
    NegativeF1,
    MacroF1,
    WeightedF1,
    Accuracy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Headline metrics (macro-averaged over both classes) with per-class and
/// support-weighted breakdowns. Undefined ratios are reported as 0 and
/// listed in `undefined`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub auc: f64,
    pub positive: ClassMetrics,
    pub negative: ClassMetrics,
    pub weighted: ClassMetrics,
    pub undefined: Vec<UndefinedMetric>,
}

fn ratio(num: usize, den: usize, flag: UndefinedMetric, flags: &mut Vec<UndefinedMetric>) -> f64 {
    if den == 0 {
        flags.push(flag);
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64, flag: UndefinedMetric, flags: &mut Vec<UndefinedMetric>) -> f64 {
    if p + r == 0.0 {
        flags.push(flag);
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn fold_metrics(matrix: &ConfusionMatrix, set: &ScoredSet) -> Result<FoldMetrics, EvalError> {
    use UndefinedMetric::*;
    let auc = roc_auc(set)?;
    let m = matrix;
    let mut flags = Vec::new();
    let pos_p = ratio(m.tp, m.tp + m.fp, PositivePrecision, &mut flags);
    let pos_r = ratio(m.tp, m.tp + m.fn_, PositiveRecall, &mut flags);
    let pos_f = harmonic(pos_p, pos_r, PositiveF1, &mut flags);
    let neg_p = ratio(m.tn, m.tn + m.fn_, NegativePrecision, &mut flags);
    let neg_r = ratio(m.tn, m.tn + m.fp, NegativeRecall, &mut flags);
    let neg_f = harmonic(neg_p, neg_r, NegativeF1, &mut flags);
    let precision = (pos_p + neg_p) / 2.0;
    let recall = (pos_r + neg_r) / 2.0;
    let f1 = harmonic(precision, recall, MacroF1, &mut flags);
    let accuracy = ratio(m.tp + m.tn, m.total(), Accuracy, &mut flags);
    let (n_pos, n_neg) = ((m.tp + m.fn_) as f64, (m.tn + m.fp) as f64);
    let n = n_pos + n_neg;
    let w_p = (pos_p * n_pos + neg_p * n_neg) / n;
    let w_r = (pos_r * n_pos + neg_r * n_neg) / n;
    let w_f = harmonic(w_p, w_r, WeightedF1, &mut flags);
    Ok(FoldMetrics {
        precision,
        recall,
        f1,
        accuracy,
        auc,
        positive: ClassMetrics { precision: pos_p, recall: pos_r, f1: pos_f },
        negative: ClassMetrics { precision: neg_p, recall: neg_r, f1: neg_f },
        weighted: ClassMetrics { precision: w_p, recall: w_r, f1: w_f },
        undefined: flags,
    })
}

/// The five headline metrics as plain values.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub auc: f64,
}

impl MetricValues {
    pub const FIELDS: [&'static str; 5] = ["precision", "recall", "f1", "accuracy", "auc"];

    pub fn as_array(&self) -> [f64; 5] {
        [self.precision, self.recall, self.f1, self.accuracy, self.auc]
    }

    fn from_array(a: [f64; 5]) -> Self {
        MetricValues {
            precision: a[0],
            recall: a[1],
            f1: a[2],
            accuracy: a[3],
            auc: a[4],
        }
    }
}

impl From<&FoldMetrics> for MetricValues {
    fn from(m: &FoldMetrics) -> Self {
        MetricValues {
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            accuracy: m.accuracy,
            auc: m.auc,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: MetricValues,
    /// Sample standard deviation (n - 1 denominator).
    pub std: MetricValues,
}

/// Mean and sample standard deviation of each metric over exactly `k` folds.
pub fn aggregate(folds: &[MetricValues], k: usize) -> Result<MetricSummary, EvalError> {
    if folds.len() != k || k == 0 {
        return Err(EvalError::WrongFoldCount {
            expected: k,
            found: folds.len(),
        });
    }
    let n = k as f64;
    let mut mean = [0.0; 5];
    for f in folds {
        for (m, v) in mean.iter_mut().zip(f.as_array()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = [0.0; 5];
    if k > 1 {
        for f in folds {
            for ((s, v), m) in var.iter_mut().zip(f.as_array()).zip(mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s = (*s / (n - 1.0)).sqrt());
    }
    Ok(MetricSummary {
        mean: MetricValues::from_array(mean),
        std: MetricValues::from_array(var),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: usize,
    pub p_value: f64,
    /// Every difference was identical; `p_value` is 1 when they were all
    /// zero and 0 otherwise.
    pub zero_variance: bool,
}

/// Two-sided paired t-test on per-fold differences `a[i] - b[i]`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest, EvalError> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(EvalError::TooFewPairs(a.len(), b.len()));
    }
    let k = a.len();
    let n = k as f64;
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let sd = (diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0)).sqrt();
    let df = k - 1;
    let scale = diffs.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    if sd <= scale * 1e-12 {
        let all_zero = scale == 0.0;
        return Ok(TTest {
            t: if all_zero { 0.0 } else { mean.signum() * f64::INFINITY },
            df,
            p_value: if all_zero { 1.0 } else { 0.0 },
            zero_variance: true,
        });
    }
    let t = mean / (sd / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, df as f64).expect("df >= 1");
    let p_value = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTest {
        t,
        df,
        p_value,
        zero_variance: false,
    })
}

/// Fold-level summary for one model on one test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub test_set: TestSet,
    pub summary: MetricSummary,
    pub per_fold: Vec<MetricValues>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseTest {
    pub test_set: TestSet,
    pub model_a: String,
    pub model_b: String,
    pub auc: TTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub k: usize,
    pub rows: Vec<ReportRow>,
    pub comparisons: Vec<PairwiseTest>,
}

impl AggregateReport {
    /// Aggregates `per_model` (model, test set, fold values) and runs a
    /// paired t-test on per-fold AUC for every model pair within a test set.
    /// Rows keep the input order.
    pub fn build(k: usize, per_model: Vec<(String, TestSet, Vec<MetricValues>)>) -> Result<Self, EvalError> {
        let mut rows = Vec::with_capacity(per_model.len());
        for (model, test_set, folds) in per_model {
            let summary = aggregate(&folds, k)?;
            rows.push(ReportRow {
                model,
                test_set,
                summary,
                per_fold: folds,
            });
        }
        let mut comparisons = Vec::new();
        for ts in [TestSet::Test1, TestSet::Test2] {
            let set: Vec<&ReportRow> = rows.iter().filter(|r| r.test_set == ts).collect();
            for (i, a) in set.iter().enumerate() {
                for b in &set[i + 1..] {
                    let auc_a: Vec<f64> = a.per_fold.iter().map(|m| m.auc).collect();
                    let auc_b: Vec<f64> = b.per_fold.iter().map(|m| m.auc).collect();
                    if k >= 2 {
                        comparisons.push(PairwiseTest {
                            test_set: ts,
                            model_a: a.model.clone(),
                            model_b: b.model.clone(),
                            auc: paired_t_test(&auc_a, &auc_b)?,
                        });
                    }
                }
            }
        }
        Ok(AggregateReport { k, rows, comparisons })
    }

    pub fn row(&self, model: &str, test_set: TestSet) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.model == model && r.test_set == test_set)
    }

    pub fn has_test_set(&self, test_set: TestSet) -> bool {
        self.rows.iter().any(|r| r.test_set == test_set)
    }
}

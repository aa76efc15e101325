use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{read_provenance_hash, PipelineError, RunConfig};
use crate::augment::{self, plan_balancing, BalancePlan};
use crate::cv_split::{attach_training_augmentation, make_folds, verify_no_leakage, FoldPlan, LeakageReport, Partition};
use crate::eval_report::render::{self, RocPoint};
use crate::eval_report::{
    confusion, fold_metrics, AggregateReport, ConfusionMatrix, FoldMetrics, MetricValues, Provenance, ScoredPair, ScoredSet,
    TestSet, DEFAULT_THRESHOLD,
};
use crate::ingest::{load_manifest, summarize, DatasetSummary, ImageRecord, Manifest};
use crate::model_zoo::{build_model, BackboneName, BuildOptions, Model};
use crate::preprocess::{decode_png, encode_png, load_png, standardize};
use crate::trainer::{load_checkpoint, read_meta, score_samples, sidecar_path, Sample, TrainConfig, TrainError, Trainer};
use crate::Error;

/// Writes `bytes` unless the file already holds exactly them. Returns
/// whether anything was written.
fn write_if_changed(path: &Path, bytes: &[u8]) -> Result<bool, PipelineError> {
    if fs::read(path).is_ok_and(|existing| existing == bytes) {
        return Ok(false);
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| PipelineError::io(path, e))?;
    Ok(true)
}

fn read_text(path: &Path) -> Result<String, PipelineError> {
    if !path.is_file() {
        return Err(PipelineError::MissingArtifact(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))
}

fn check_hash(path: &Path, found: Option<&str>, expected: &str) -> Result<(), PipelineError> {
    match found {
        Some(h) if h == expected => Ok(()),
        other => Err(PipelineError::MixedProvenance {
            path: path.to_path_buf(),
            found: other.unwrap_or("<none>").to_owned(),
            expected: expected.to_owned(),
        }),
    }
}

fn commented(provenance: &str, body: &str) -> String {
    format!("# {provenance}\n{body}")
}

fn describe(report: &LeakageReport) -> String {
    let mut parts = Vec::new();
    if let Some(v) = report.violations.first() {
        parts.push(format!(
            "{} straddling patient(s), first {} in fold {}",
            report.violations.len(),
            v.patient_id,
            v.fold
        ));
    }
    if !report.augmented_in_eval.is_empty() {
        parts.push(format!("{} augmented image(s) outside TRAIN", report.augmented_in_eval.len()));
    }
    if !report.coverage_errors.is_empty() {
        parts.push(format!("{} coverage error(s)", report.coverage_errors.len()));
    }
    if !report.test_count_errors.is_empty() {
        parts.push(format!("{} patient(s) not tested exactly once", report.test_count_errors.len()));
    }
    parts.join("; ")
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrepareSummary {
    pub images: usize,
    pub test2_images: usize,
    /// Files (images and manifests) created or rewritten.
    pub written: usize,
    /// Files already present with identical content.
    pub unchanged: usize,
}

impl PrepareSummary {
    fn count(&mut self, written: bool) {
        if written {
            self.written += 1;
        } else {
            self.unchanged += 1;
        }
    }
}

#[derive(Serialize)]
struct PrepareProvenance<'a> {
    config_hash: &'a str,
    seed: u64,
    image_size: usize,
    stills: DatasetSummary,
    test2: Option<DatasetSummary>,
}

fn standardize_set(
    manifest: &Manifest,
    out_dir: &Path,
    subdir: &str,
    size: usize,
    summary: &mut PrepareSummary,
) -> Result<Manifest, Error> {
    let mut records = Vec::with_capacity(manifest.len());
    for r in manifest.records() {
        if r.is_augmented {
            return Err(PipelineError::Config(format!("input manifest lists augmented image {}", r.image_id)).into());
        }
        let src = manifest.resolve(r);
        let img = load_png(&src).map_err(|e| PipelineError::UnreadableImage {
            image_id: r.image_id.clone(),
            path: src.clone(),
            reason: e.to_string(),
        })?;
        let out = standardize(&img, size)?;
        let rel = PathBuf::from(subdir).join(format!("{}.png", r.image_id));
        summary.count(write_if_changed(&out_dir.join(&rel), &encode_png(&out))?);
        let mut rec = r.clone();
        rec.path = rel;
        records.push(rec);
    }
    Ok(Manifest::with_base_dir(records, out_dir)?)
}

/// Standardises every image of the input manifest(s) into
/// `<out>/prepared/`. Files whose bytes would not change are left alone.
pub fn prepare(cfg: &RunConfig) -> Result<PrepareSummary, Error> {
    cfg.validate()?;
    let layout = cfg.layout();
    let prov = cfg.provenance_line();
    let size = cfg.image_size();
    let dir = layout.prepared_dir();
    let mut s = PrepareSummary::default();

    let stills = load_manifest(cfg.resolve(&cfg.manifest))?;
    let prepared = standardize_set(&stills, &dir, "images", size, &mut s)?;
    s.images = prepared.len();
    s.count(write_if_changed(&layout.prepared_manifest(), commented(&prov, &prepared.to_csv()).as_bytes())?);

    let mut test2 = None;
    if let Some(t2) = &cfg.test2_manifest {
        let m = load_manifest(cfg.resolve(t2))?;
        let p = standardize_set(&m, &dir, "images_test2", size, &mut s)?;
        s.test2_images = p.len();
        s.count(write_if_changed(&layout.prepared_test2_manifest(), commented(&prov, &p.to_csv()).as_bytes())?);
        test2 = Some(summarize(&p));
    }

    let hash = cfg.config_hash();
    let record = PrepareProvenance {
        config_hash: &hash,
        seed: cfg.seed,
        image_size: size,
        stills: summarize(&prepared),
        test2,
    };
    let json = serde_json::to_string_pretty(&record).expect("provenance serialises") + "\n";
    s.count(write_if_changed(&layout.provenance(), json.as_bytes())?);
    Ok(s)
}

fn load_prepared_at(cfg: &RunConfig, path: &Path) -> Result<Manifest, Error> {
    let text = read_text(path)?;
    check_hash(path, read_provenance_hash(&text), &cfg.config_hash())?;
    Ok(Manifest::parse(&text, cfg.layout().prepared_dir())?)
}

/// The prepared still-image manifest.
pub fn load_prepared(cfg: &RunConfig) -> Result<Manifest, Error> {
    load_prepared_at(cfg, &cfg.layout().prepared_manifest())
}

fn load_prepared_test2(cfg: &RunConfig) -> Result<Option<Manifest>, Error> {
    match cfg.test2_manifest {
        Some(_) => load_prepared_at(cfg, &cfg.layout().prepared_test2_manifest()).map(Some),
        None => Ok(None),
    }
}

/// Builds, verifies and writes the fold plan.
pub fn split(cfg: &RunConfig) -> Result<FoldPlan, Error> {
    cfg.validate()?;
    let m = load_prepared(cfg)?;
    let plan = make_folds(&m, cfg.k, cfg.seed)?;
    let report = verify_no_leakage(&plan, &m);
    if !report.is_clean() {
        return Err(PipelineError::Leakage(describe(&report)).into());
    }
    write_if_changed(&cfg.layout().plan(), plan.to_text(&[cfg.provenance_line()]).as_bytes())?;
    Ok(plan)
}

/// Reads the written plan back and re-verifies it against `manifest`.
pub fn load_plan(cfg: &RunConfig, manifest: &Manifest) -> Result<FoldPlan, Error> {
    let path = cfg.layout().plan();
    let text = read_text(&path)?;
    check_hash(&path, read_provenance_hash(&text), &cfg.config_hash())?;
    let plan = FoldPlan::from_text(&text, manifest)?;
    if plan.k != cfg.k {
        return Err(PipelineError::Malformed {
            path,
            reason: format!("plan has {} folds, config expects {}", plan.k, cfg.k),
        }
        .into());
    }
    let report = verify_no_leakage(&plan, manifest);
    if !report.is_clean() {
        return Err(PipelineError::Leakage(describe(&report)).into());
    }
    Ok(plan)
}

fn fold_indices(cfg: &RunConfig, fold: Option<usize>) -> Result<Vec<usize>, PipelineError> {
    match fold {
        Some(f) if f >= cfg.k => Err(PipelineError::FoldOutOfRange { fold: f, k: cfg.k }),
        Some(f) => Ok(vec![f]),
        None => Ok((0..cfg.k).collect()),
    }
}

fn load_samples(manifest: &Manifest, ids: &BTreeSet<String>, size: usize) -> Result<Vec<Sample>, Error> {
    ids.iter()
        .map(|id| {
            let r = manifest.get(id).ok_or_else(|| PipelineError::Malformed {
                path: manifest.base_dir().to_path_buf(),
                reason: format!("plan lists unknown image {id}"),
            })?;
            let path = manifest.resolve(r);
            let image = load_png(&path).map_err(|e| PipelineError::UnreadableImage {
                image_id: id.clone(),
                path: path.clone(),
                reason: e.to_string(),
            })?;
            if image.height() != size || image.width() != size {
                return Err(PipelineError::Config(format!(
                    "prepared image {id} is {}x{}, config expects {size}x{size}; re-run prepare",
                    image.height(),
                    image.width()
                ))
                .into());
            }
            Ok(Sample {
                image_id: id.clone(),
                image,
                label: r.label,
            })
        })
        .collect()
}

/// Plans, verifies and writes the fold's balancing copies, returning them as
/// samples decoded from the written files. The fold's manifest lists the
/// whole training pool, originals pointing back into `prepared/`.
fn materialize_augmentation(
    cfg: &RunConfig,
    manifest: &Manifest,
    plan: &FoldPlan,
    fold: usize,
    originals: &[Sample],
) -> Result<Vec<Sample>, Error> {
    let layout = cfg.layout();
    let train_ids = plan.folds[fold].ids(Partition::Train);
    let train_m = manifest.filter(|r| train_ids.contains(&r.image_id))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.fold_seed(fold));
    let bp = plan_balancing(&train_m, &cfg.augment, "aug", &mut rng)?;

    let mut per_fold = vec![BalancePlan::default(); plan.k];
    per_fold[fold] = bp.clone();
    let attached = attach_training_augmentation(plan, &per_fold)?;
    let records = bp.records_in(&train_m, Path::new("images"));
    let report = verify_no_leakage(&attached, &manifest.extended(records.iter().cloned())?);
    if !report.is_clean() {
        return Err(PipelineError::Leakage(describe(&report)).into());
    }

    let dir = layout.augmented_dir(fold);
    let parents: HashMap<&str, &Sample> = originals.iter().map(|s| (s.image_id.as_str(), s)).collect();
    let mut out = Vec::with_capacity(bp.len());
    for (a, rec) in bp.additions.iter().zip(&records) {
        let parent = parents[a.parent_id.as_str()];
        let img = augment::apply(&parent.image, &a.params)?;
        let bytes = encode_png(&img);
        let path = dir.join(&rec.path);
        write_if_changed(&path, &bytes)?;
        out.push(Sample {
            image_id: rec.image_id.clone(),
            image: decode_png(&bytes, &path)?,
            label: rec.label,
        });
    }
    let to_prepared = Path::new("..").join("..").join("prepared");
    let pool = train_m
        .records()
        .iter()
        .map(|r| ImageRecord {
            path: to_prepared.join(&r.path),
            ..r.clone()
        })
        .chain(records)
        .collect();
    let aug_manifest = Manifest::with_base_dir(pool, &dir)?;
    write_if_changed(
        &layout.augmented_manifest(fold),
        commented(&cfg.provenance_line(), &aug_manifest.to_csv()).as_bytes(),
    )?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub backbone: BackboneName,
    pub fold: usize,
    pub epochs: usize,
    pub resumed_after: usize,
    pub best_epoch: Option<usize>,
    pub best_val_auc: Option<f64>,
    pub train_images: usize,
}

fn train_one(
    cfg: &RunConfig,
    bb: BackboneName,
    fold: usize,
    train: &[Sample],
    val: &[Sample],
    progress: &mut dyn FnMut(&str),
) -> Result<TrainSummary, Error> {
    let layout = cfg.layout();
    let hash = cfg.config_hash();
    let spec = cfg.backbone_spec(bb);
    let (last, best) = (layout.last_checkpoint(bb, fold), layout.best_checkpoint(bb, fold));
    let tc = TrainConfig {
        seed: cfg.fold_seed(fold),
        ..cfg.train.clone()
    };
    let resumable = last.is_file()
        && best.is_file()
        && read_meta(&last).ok().and_then(|m| m.config_hash).as_deref() == Some(hash.as_str());
    let mut trainer = if resumable {
        Trainer::resume(&last, &best, &spec, tc)?
    } else {
        let opts = BuildOptions {
            input_size: cfg.image_size(),
            seed: cfg.fold_seed(fold),
            weights_dir: cfg.weights_dir.as_ref().map(|d| cfg.resolve(d)),
            freeze_backbone: false,
        };
        Trainer::new(build_model(&spec, &opts)?, tc)?
    };
    let resumed_after = trainer.state().epoch;
    if resumed_after > 0 {
        progress(&format!("{bb} fold {fold}: resuming after epoch {resumed_after}"));
    }
    let comments = [cfg.provenance_line()];
    let log_path = layout.train_log(bb, fold);
    let write_log = |t: &Trainer| -> Result<(), TrainError> {
        t.save(&last, &best, Some(&hash))?;
        fs::write(&log_path, t.state().log_csv(&comments)).map_err(|e| TrainError::Io {
            path: log_path.clone(),
            source: e,
        })
    };
    trainer.run(train, val, |t, rec| {
        progress(&format!(
            "{bb} fold {fold} epoch {:>3}: loss {:.5} val_auc {:.4} lr {:.0e}",
            rec.epoch, rec.train_loss, rec.val_auc, rec.lr
        ));
        write_log(t)
    })?;
    write_log(&trainer)?;
    let state = trainer.state();
    Ok(TrainSummary {
        backbone: bb,
        fold,
        epochs: state.epoch,
        resumed_after,
        best_epoch: state.best_epoch,
        best_val_auc: state.best_checkpoint_auc(),
        train_images: train.len(),
    })
}

/// Trains every configured backbone on the requested fold (or all folds).
/// Interrupted folds resume from `last.ckpt`; finished folds are skipped.
pub fn train(cfg: &RunConfig, fold: Option<usize>, mut progress: impl FnMut(&str)) -> Result<Vec<TrainSummary>, Error> {
    cfg.validate()?;
    let folds = fold_indices(cfg, fold)?;
    let m = load_prepared(cfg)?;
    let plan = load_plan(cfg, &m)?;
    let size = cfg.image_size();
    let mut out = Vec::new();
    for f in folds {
        let mut train_samples = load_samples(&m, plan.folds[f].ids(Partition::Train), size)?;
        let aug = materialize_augmentation(cfg, &m, &plan, f, &train_samples)?;
        train_samples.extend(aug);
        let val = load_samples(&m, plan.folds[f].ids(Partition::Val), size)?;
        for &bb in &cfg.backbones {
            out.push(train_one(cfg, bb, f, &train_samples, &val, &mut progress)?);
        }
    }
    Ok(out)
}

/// Per-(model, fold, test set) metrics artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub config_hash: String,
    pub seed: u64,
    pub model: String,
    pub fold: usize,
    pub test_set: TestSet,
    pub n_images: usize,
    pub confusion: ConfusionMatrix,
    pub metrics: FoldMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub backbone: BackboneName,
    pub fold: usize,
    pub test_set: TestSet,
    pub n_images: usize,
    pub auc: f64,
    pub accuracy: f64,
}

fn scores_csv(provenance: &str, set: &ScoredSet) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["image_id", "label", "score"]).expect("in-memory write");
    for p in set.pairs() {
        w.write_record([p.image_id.as_str(), &p.label.to_string(), &p.score.to_string()])
            .expect("in-memory write");
    }
    commented(provenance, &String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8"))
}

fn parse_scores(path: &Path, text: &str, provenance: Provenance) -> Result<ScoredSet, Error> {
    let bad = |reason: String| PipelineError::Malformed {
        path: path.to_path_buf(),
        reason,
    };
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let mut pairs = Vec::new();
    for row in r.records() {
        let row = row.map_err(|e| bad(e.to_string()))?;
        if row.len() != 3 {
            return Err(bad(format!("expected 3 columns, found {}", row.len())).into());
        }
        pairs.push(ScoredPair {
            image_id: row[0].to_owned(),
            label: row[1].parse().map_err(|_| bad(format!("bad label {:?}", &row[1])))?,
            score: row[2].parse().map_err(|_| bad(format!("bad score {:?}", &row[2])))?,
        });
    }
    Ok(ScoredSet::new(pairs, provenance)?)
}

fn score_and_write(
    cfg: &RunConfig,
    model: &Model,
    bb: BackboneName,
    fold: usize,
    test_set: TestSet,
    samples: &[Sample],
) -> Result<EvalSummary, Error> {
    let layout = cfg.layout();
    let scores = score_samples(model, samples)?;
    let pairs = samples
        .iter()
        .zip(scores)
        .map(|(s, score)| ScoredPair {
            image_id: s.image_id.clone(),
            score,
            label: s.label.target(),
        })
        .collect();
    let provenance = Provenance {
        fold,
        model: bb.as_str().to_owned(),
        test_set,
    };
    let set = ScoredSet::new(pairs, provenance)?;
    let cm = confusion(&set, DEFAULT_THRESHOLD);
    let metrics = fold_metrics(&cm, &set)?;
    write_if_changed(&layout.scores(bb, fold, test_set), scores_csv(&cfg.provenance_line(), &set).as_bytes())?;
    let file = MetricsFile {
        config_hash: cfg.config_hash(),
        seed: cfg.seed,
        model: bb.as_str().to_owned(),
        fold,
        test_set,
        n_images: set.len(),
        confusion: cm,
        metrics: metrics.clone(),
    };
    let json = serde_json::to_string_pretty(&file).expect("metrics serialise") + "\n";
    write_if_changed(&layout.metrics(bb, fold, test_set), json.as_bytes())?;
    Ok(EvalSummary {
        backbone: bb,
        fold,
        test_set,
        n_images: set.len(),
        auc: metrics.auc,
        accuracy: metrics.accuracy,
    })
}

/// Scores each fold's best checkpoint on its TEST partition (Test-1) and,
/// when configured, on the second manifest restricted to patients outside
/// that fold's TRAIN and VAL (Test-2).
pub fn evaluate(cfg: &RunConfig) -> Result<Vec<EvalSummary>, Error> {
    cfg.validate()?;
    let layout = cfg.layout();
    let hash = cfg.config_hash();
    let size = cfg.image_size();
    let m = load_prepared(cfg)?;
    let plan = load_plan(cfg, &m)?;
    let test2 = load_prepared_test2(cfg)?;

    let mut models: BTreeMap<(BackboneName, usize), Model> = BTreeMap::new();
    for &bb in &cfg.backbones {
        let spec = cfg.backbone_spec(bb);
        for f in 0..cfg.k {
            let path = layout.best_checkpoint(bb, f);
            if !path.is_file() || !sidecar_path(&path).is_file() {
                return Err(PipelineError::MissingCheckpoint(path).into());
            }
            let ck = load_checkpoint(&path, &spec)?;
            check_hash(&sidecar_path(&path), ck.meta.config_hash.as_deref(), &hash)?;
            models.insert((bb, f), ck.model);
        }
    }

    let mut out = Vec::new();
    for (f, fold) in plan.folds.iter().enumerate() {
        let test1 = load_samples(&m, fold.ids(Partition::Test), size)?;
        let test2_samples = match &test2 {
            Some(t2) => {
                let excluded: BTreeSet<&str> = fold.patients_in(Partition::Train).chain(fold.patients_in(Partition::Val)).collect();
                let ids: BTreeSet<String> = t2
                    .records()
                    .iter()
                    .filter(|r| !excluded.contains(r.patient_id.as_str()))
                    .map(|r| r.image_id.clone())
                    .collect();
                if ids.is_empty() {
                    return Err(PipelineError::Config(format!(
                        "Test-2 set for fold {f} is empty once TRAIN and VAL patients are excluded"
                    ))
                    .into());
                }
                Some(load_samples(t2, &ids, size)?)
            }
            None => None,
        };
        for &bb in &cfg.backbones {
            let model = &models[&(bb, f)];
            out.push(score_and_write(cfg, model, bb, f, TestSet::Test1, &test1)?);
            if let Some(s) = &test2_samples {
                out.push(score_and_write(cfg, model, bb, f, TestSet::Test2, s)?);
            }
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    config_hash: &'a str,
    seed: u64,
    k: usize,
    threshold: f64,
    /// AUC of all folds' scores pooled, per `<model>_<test set>`.
    pooled_auc: BTreeMap<String, f64>,
    report: &'a AggregateReport,
}

fn display_name(model: &str) -> String {
    model
        .parse::<BackboneName>()
        .map(|b| b.display_name().to_owned())
        .unwrap_or_else(|_| model.to_owned())
}

/// Aggregates the metrics files into the results table, ROC data and
/// figures under `<out>/report/`. Every input must carry this config's hash.
pub fn report(cfg: &RunConfig) -> Result<AggregateReport, Error> {
    cfg.validate()?;
    let layout = cfg.layout();
    let hash = cfg.config_hash();
    let prov = cfg.provenance_line();
    let out_dir = layout.report_dir();
    let test_sets: Vec<TestSet> = if cfg.test2_manifest.is_some() {
        vec![TestSet::Test1, TestSet::Test2]
    } else {
        vec![TestSet::Test1]
    };

    let mut rows = Vec::new();
    let mut pooled_auc = BTreeMap::new();
    let mut curves: BTreeMap<TestSet, Vec<Vec<RocPoint>>> = BTreeMap::new();
    let mut matrices: BTreeMap<TestSet, Vec<ConfusionMatrix>> = BTreeMap::new();
    for &ts in &test_sets {
        for &bb in &cfg.backbones {
            let mut values = Vec::with_capacity(cfg.k);
            let mut sets = Vec::with_capacity(cfg.k);
            let mut cm_total: Option<ConfusionMatrix> = None;
            for f in 0..cfg.k {
                let mpath = layout.metrics(bb, f, ts);
                let text = read_text(&mpath)?;
                let mf: MetricsFile = serde_json::from_str(&text).map_err(|e| PipelineError::Malformed {
                    path: mpath.clone(),
                    reason: e.to_string(),
                })?;
                check_hash(&mpath, Some(&mf.config_hash), &hash)?;
                if mf.fold != f || mf.model != bb.as_str() || mf.test_set != ts {
                    return Err(PipelineError::Malformed {
                        path: mpath,
                        reason: "model, fold or test set does not match the file name".into(),
                    }
                    .into());
                }
                values.push(MetricValues::from(&mf.metrics));
                cm_total = Some(match cm_total {
                    Some(c) => c.merged(&mf.confusion),
                    None => mf.confusion,
                });
                let spath = layout.scores(bb, f, ts);
                let stext = read_text(&spath)?;
                check_hash(&spath, read_provenance_hash(&stext), &hash)?;
                let provenance = Provenance {
                    fold: f,
                    model: bb.as_str().to_owned(),
                    test_set: ts,
                };
                sets.push(parse_scores(&spath, &stext, provenance)?);
            }
            let (curve, auc) = render::pooled_roc(&sets)?;
            write_if_changed(
                &out_dir.join(format!("roc_{bb}_{ts}.csv")),
                commented(&prov, &render::roc_csv(&curve)).as_bytes(),
            )?;
            pooled_auc.insert(format!("{bb}_{ts}"), auc);
            curves.entry(ts).or_default().push(curve);
            matrices.entry(ts).or_default().extend(cm_total);
            rows.push((bb.as_str().to_owned(), ts, values));
        }
    }
    let report = AggregateReport::build(cfg.k, rows)?;

    let md = format!("<!-- {prov} -->\n\n{}", render::table_markdown(&report, display_name));
    write_if_changed(&out_dir.join("table1.md"), md.as_bytes())?;
    write_if_changed(&out_dir.join("table1.csv"), commented(&prov, &render::table_csv(&report)).as_bytes())?;
    let summary = SummaryFile {
        config_hash: &hash,
        seed: cfg.seed,
        k: cfg.k,
        threshold: DEFAULT_THRESHOLD,
        pooled_auc,
        report: &report,
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serialises") + "\n";
    write_if_changed(&out_dir.join("summary.json"), json.as_bytes())?;

    let seed = cfg.seed.to_string();
    let legend = cfg.backbones.iter().map(|b| b.as_str()).collect::<Vec<_>>().join(",");
    let text = [("config_hash", hash.as_str()), ("seed", seed.as_str()), ("models", legend.as_str())];
    for &ts in &test_sets {
        let roc = render::roc_figure(&curves[&ts])?.encode_png(&text);
        write_if_changed(&out_dir.join(format!("roc_{ts}.png")), &roc)?;
        let cm = render::confusion_figure(&matrices[&ts])?.encode_png(&text);
        write_if_changed(&out_dir.join(format!("confusion_{ts}.png")), &cm)?;
    }
    Ok(report)
}

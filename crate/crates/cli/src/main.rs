use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sonoclass::ingest::generate_synthetic;
use sonoclass::pipeline;
use sonoclass::{Error, Profile, RunConfig, SynthConfig};

/// Ultrasound still-image classification with patient-grouped cross-validation.
#[derive(Debug, Parser)]
#[command(name = "sonoclass", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the profile in the config (desk or reproduction).
    #[arg(long)]
    profile: Option<Profile>,
    /// Override the run seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Standardise every image in the manifest.
    Prepare(Common),
    /// Build and verify the patient-grouped fold plan.
    Split(Common),
    /// Train the configured backbones.
    Train {
        #[command(flatten)]
        common: Common,
        /// Train only this fold (0-based).
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Score the held-out sets with the best checkpoints.
    Evaluate(Common),
    /// Aggregate metrics into tables and figures.
    Report(Common),
    /// Run every stage in order.
    Run(Common),
    /// Write a synthetic dataset and its manifest.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    patients: usize,
    #[arg(long, default_value_t = 20)]
    images: usize,
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 1.0)]
    separation: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    video_frames: usize,
}

fn load(common: &Common) -> Result<RunConfig, Error> {
    let cfg = RunConfig::load(&common.config)?.with_overrides(common.profile, common.seed);
    cfg.validate()?;
    Ok(cfg)
}

fn progress(line: &str) {
    eprintln!("{line}");
}

fn do_prepare(cfg: &RunConfig) -> Result<(), Error> {
    let s = pipeline::prepare(cfg)?;
    eprintln!(
        "prepared {} images ({} test-2): {} written, {} unchanged",
        s.images, s.test2_images, s.written, s.unchanged
    );
    Ok(())
}

fn do_split(cfg: &RunConfig) -> Result<(), Error> {
    let plan = pipeline::split(cfg)?;
    for (i, f) in plan.folds.iter().enumerate() {
        eprintln!(
            "fold {i}: train {} val {} test {}",
            f.ids(sonoclass::Partition::Train).len(),
            f.ids(sonoclass::Partition::Val).len(),
            f.ids(sonoclass::Partition::Test).len()
        );
    }
    Ok(())
}

fn do_train(cfg: &RunConfig, fold: Option<usize>) -> Result<(), Error> {
    for s in pipeline::train(cfg, fold, progress)? {
        match (s.best_epoch, s.best_val_auc) {
            (Some(e), Some(auc)) => eprintln!("{} fold {}: best val AUC {auc:.4} at epoch {e}", s.backbone, s.fold),
            _ => eprintln!("{} fold {}: no epochs run", s.backbone, s.fold),
        }
    }
    Ok(())
}

fn do_evaluate(cfg: &RunConfig) -> Result<(), Error> {
    for s in pipeline::evaluate(cfg)? {
        eprintln!(
            "{} fold {} {}: n={} AUC {:.4} accuracy {:.4}",
            s.backbone, s.fold, s.test_set, s.n_images, s.auc, s.accuracy
        );
    }
    Ok(())
}

fn do_report(cfg: &RunConfig) -> Result<(), Error> {
    pipeline::report(cfg)?;
    eprintln!("report written to {}", cfg.layout().report_dir().display());
    Ok(())
}

fn synth(a: &SynthArgs) -> Result<(), Error> {
    let sc = SynthConfig {
        n_patients_per_class: a.patients,
        images_per_patient: a.images,
        image_size: a.size,
        class_texture_separation: a.separation,
        seed: a.seed,
        video_frames_per_patient: a.video_frames,
    };
    let ds = generate_synthetic(&sc, &a.out)?;
    eprintln!("wrote {} images to {}", ds.stills.records().len(), a.out.display());
    if let Some(v) = ds.video {
        eprintln!("wrote {} video frames", v.records().len());
    }
    Ok(())
}

fn execute(command: &Command) -> Result<(), Error> {
    match command {
        Command::Prepare(c) => do_prepare(&load(c)?),
        Command::Split(c) => do_split(&load(c)?),
        Command::Train { common, fold } => do_train(&load(common)?, *fold),
        Command::Evaluate(c) => do_evaluate(&load(c)?),
        Command::Report(c) => do_report(&load(c)?),
        Command::Run(c) => {
            let cfg = load(c)?;
            do_prepare(&cfg)?;
            do_split(&cfg)?;
            do_train(&cfg, None)?;
            do_evaluate(&cfg)?;
            do_report(&cfg)
        }
        Command::Synth(a) => synth(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

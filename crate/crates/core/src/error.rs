use thiserror::Error;

use crate::augment::AugmentError;
use crate::cv_split::SplitError;
use crate::eval_report::EvalError;
use crate::ingest::IngestError;
use crate::model_zoo::ModelError;
use crate::pipeline::PipelineError;
use crate::preprocess::PreprocessError;
use crate::trainer::TrainError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

impl Error {
    /// True for problems with the user's inputs (configuration, manifests,
    /// plans, missing artifacts) as opposed to failures while running.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Ingest(e) => !matches!(e, IngestError::Io { .. }),
            Error::Preprocess(e) => !matches!(e, PreprocessError::Io { .. }),
            Error::Augment(_) | Error::Split(_) => true,
            Error::Model(e) => !matches!(e, ModelError::Io { .. }),
            Error::Train(e) => e.is_validation(),
            Error::Eval(_) => true,
            Error::Pipeline(e) => e.is_validation(),
        }
    }
}

use std::fmt::Display;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::cohort::CohortError;
use crate::ehr::EhrError;
use crate::eval::EvalError;
use crate::explain::ExplainError;
use crate::features::FeatureError;
use crate::gbt::GbtError;
use crate::signal::SignalError;
use crate::synth::SynthError;
use crate::ts_features::TsError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Ehr(#[from] EhrError),
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Gbt(#[from] GbtError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Explain(#[from] ExplainError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Ts(#[from] TsError),
}

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn parse(path: impl AsRef<Path>, message: impl Display) -> Self {
        Error::Parse {
            path: path.as_ref().to_path_buf(),
            message: message.to_string(),
        }
    }
}

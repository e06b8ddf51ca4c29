use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("missing upstream artifact {} (run `{stage}` first)", path.display())]
    UpstreamArtifactMissing { path: PathBuf, stage: &'static str },
    #[error(transparent)]
    Core(#[from] lvef_core::Error),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::ConfigInvalid(_) => 2,
            _ => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::ConfigInvalid(_) => "ConfigInvalid",
            CliError::UpstreamArtifactMissing { .. } => "UpstreamArtifactMissing",
            CliError::Core(_) => "CoreError",
            CliError::Runtime(_) => "RuntimeError",
        }
    }
}

macro_rules! core_from {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Core(e.into())
            }
        })*
    };
}

core_from!(
    lvef_core::gbt::GbtError,
    lvef_core::eval::EvalError,
    lvef_core::explain::ExplainError,
    lvef_core::features::FeatureError,
    lvef_core::cohort::CohortError,
    lvef_core::ehr::EhrError,
    lvef_core::signal::SignalError,
    lvef_core::synth::SynthError
);

use distillens::distill::DistillError;
use distillens::divergence::DivergenceError;
use distillens::eval::EvalError;
use distillens::lens::LensError;
use distillens::model::{CheckpointError, ModelError};
use distillens::synth::SynthError;
use distillens::tensor::TensorError;
use thiserror::Error;

/// Failure classes, one per exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Numeric(_) => 3,
            Self::Io(_) => 4,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NonFinite { .. } | TensorError::NonPositiveLog { .. } => Self::Numeric(e.to_string()),
            _ => Self::Config(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Tensor(t) => t.into(),
            other => Self::Config(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Model(m) => m.into(),
            other => Self::Io(format!("checkpoint: {other}")),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::InvalidSpec(_) => Self::Config(e.to_string()),
            other => Self::Io(format!("corpus: {other}")),
        }
    }
}

impl From<LensError> for CliError {
    fn from(e: LensError) -> Self {
        match e {
            LensError::Tensor(t) => t.into(),
            LensError::Model(m) => m.into(),
            other => Self::Config(other.to_string()),
        }
    }
}

impl From<DivergenceError> for CliError {
    fn from(e: DivergenceError) -> Self {
        match e {
            DivergenceError::Tensor(t) => t.into(),
            DivergenceError::NonPositiveRatio(_) => Self::Numeric(e.to_string()),
            other => Self::Config(other.to_string()),
        }
    }
}

impl From<DistillError> for CliError {
    fn from(e: DistillError) -> Self {
        match e {
            DistillError::NonFinite { .. } => Self::Numeric(e.to_string()),
            DistillError::Tensor(t) => t.into(),
            DistillError::Model(m) => m.into(),
            DistillError::Lens(l) => l.into(),
            DistillError::Divergence(d) => d.into(),
            other => Self::Config(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(m) => m.into(),
            EvalError::Lens(l) => l.into(),
            EvalError::Divergence(d) => d.into(),
            EvalError::Distill(d) => d.into(),
            other => Self::Config(other.to_string()),
        }
    }
}

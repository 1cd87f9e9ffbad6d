use std::path::PathBuf;

use lorafwi_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("{block}: expected {expected}, got {actual}")]
    LayerAlgebra {
        block: String,
        expected: String,
        actual: String,
    },

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("unsupported {what} version {version}")]
    UnknownVersion { what: &'static str, version: u32 },

    #[error("parameter {name}: shape mismatch, file has {found:?} but model expects {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("missing parameter {0}")]
    MissingParam(String),

    #[error("adapter fingerprint {found} does not match base model fingerprint {expected}")]
    Fingerprint { expected: String, found: String },

    #[error("LoRA target filter matched no layer")]
    EmptyTarget,

    #[error("invalid LoRA config: {0}")]
    LoraConfig(String),

    #[error("CFL condition violated: {0}")]
    Cfl(String),

    #[error("simulation became unstable at step {step}")]
    Unstable { step: usize },

    #[error("sample {index}: {source}")]
    Sample {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    #[error("missing gradient for trainable parameter {0}")]
    MissingGradient(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

//! Concept recommendation: LLM-aligned embeddings, a student ranker distilled
//! from teacher prerequisite judgements, and a knowledge-tracing fine ranker.

pub mod config;
pub mod dataset;
pub mod dkt;
pub mod encoder;
pub mod eval;
pub mod gateway;
pub mod joint;
pub mod pipeline;
pub mod reranker;
pub mod student;
pub mod synthetic;
pub mod teacher;
pub mod tensor;

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Dataset(#[from] dataset::DatasetError),
    #[error(transparent)]
    Gateway(#[from] gateway::GatewayError),
    #[error(transparent)]
    Encoder(#[from] encoder::EncoderError),
    #[error(transparent)]
    Teacher(#[from] teacher::TeacherError),
    #[error(transparent)]
    Student(#[from] student::StudentError),
    #[error(transparent)]
    Dkt(#[from] dkt::DktError),
    #[error(transparent)]
    Rerank(#[from] reranker::RerankError),
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    /// An upstream artifact is absent.
    #[error("missing {path}: run {command} first")]
    Missing {
        path: PathBuf,
        command: &'static str,
    },
    #[error("{0}")]
    Usage(String),
    /// The teacher or encoder backend could not finish its work.
    #[error("backend failure: {0}")]
    Backend(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit status: 1 usage, 2 missing upstream artifact, 3 backend failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Missing { .. } => 2,
            Error::Gateway(_) | Error::Backend(_) => 3,
            Error::Encoder(encoder::EncoderError::Gateway(_)) => 3,
            Error::Encoder(encoder::EncoderError::Incomplete { .. }) => 3,
            Error::Teacher(
                teacher::TeacherError::Gateway(_)
                | teacher::TeacherError::Malformed(_)
                | teacher::TeacherError::Coverage { .. },
            ) => 3,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }
}

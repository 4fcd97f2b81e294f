use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("character {0:?} is not in the vocabulary")]
    UnknownCharacter(char),

    #[error("insufficient data: requested {requested} sequences but only {available} available (short by {})", requested - available)]
    InsufficientData { requested: usize, available: usize },

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    #[error("sequence of length {len} exceeds model context of {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("training diverged (non-finite loss) in epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("input contains no mask token")]
    NoMaskToken,

    #[error("operation requires a {expected} model")]
    WrongMode { expected: &'static str },

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("backend lacks capability `{0}`")]
    CapabilityMissing(&'static str),

    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: usize },

    #[error("HTTP {status} after {attempts} attempt(s): {body}")]
    HttpStatus {
        status: u16,
        attempts: usize,
        body: String,
    },

    #[error("network error after {attempts} attempt(s): {message}")]
    Network { attempts: usize, message: String },

    #[error("malformed response: {0}")]
    MalformedResponse(String),

    #[error("fine-tuning job {job_id} failed: {reason}")]
    JobFailed { job_id: String, reason: String },

    #[error("no paraphrase pairs supplied")]
    ZeroPairs,

    #[error("min-k percentage {0} outside (0, 100]")]
    PercentOutOfRange(f64),

    #[error("scores contain a single class; need at least one member and one non-member")]
    SingleClass,

    #[error("target false-positive rate {0} outside [0, 1]")]
    FprOutOfRange(f64),

    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("artifact {} was produced by config {found}, current config is {expected} (use --force to override)", path.display())]
    ConfigHashMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub fn stage(stage: &'static str, source: Error) -> Self {
        Error::Stage {
            stage,
            source: Box::new(source),
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the selection and distillation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {kind}")]
    Parse { line: usize, kind: ParseErrorKind },

    #[error("invalid data: {0}")]
    Invalid(String),

    #[error("zero-norm vector cannot be compared by cosine")]
    ZeroNorm,

    #[error("class {class} has no records")]
    EmptyClass { class: usize },

    #[error("lambda must be nonpositive, got {0}")]
    PositiveLambda(f64),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("class {class} has {size} faces, exhaustive search supports at most {max}")]
    ClassTooLarge { class: usize, size: usize, max: usize },

    #[error("architecture error: {0}")]
    Architecture(String),

    #[error("non-finite activation at layer {layer}")]
    NonFiniteActivation { layer: usize },

    #[error("training diverged at epoch {epoch} (loss {loss}); lower the learning rate")]
    Diverged { epoch: usize, loss: f64 },

    #[error("unknown supervision signal `{0}` (expected c, s, sc or dc)")]
    UnknownSupervision(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseErrorKind {
    #[error("malformed header: {0}")]
    Header(String),
    #[error("expected {expected} values, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-finite value `{0}`")]
    NonFinite(String),
    #[error("cannot parse `{0}`")]
    BadToken(String),
    #[error("unexpected end of file")]
    UnexpectedEof,
    #[error("{0}")]
    Structure(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(line: usize, kind: ParseErrorKind) -> Self {
        Error::Parse { line, kind }
    }
}

use alloc::boxed::Box;
use alloc::string::String;
use core::fmt;

/// Errors produced by the editing core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not conform.
    Shape { op: &'static str, detail: String },
    /// A variable was used with a tape that did not record it.
    Provenance,
    /// A NaN or infinity appeared where a finite value is required.
    NonFinite { context: &'static str },
    /// An argument lies outside its documented domain.
    Argument { what: &'static str, detail: String },
    /// A tag is not part of the concept vocabulary.
    UnknownTag(String),
    /// The projection base is (numerically) zero.
    DegenerateGuidance,
    /// Cosine similarity of a zero vector.
    UndefinedSimilarity,
    /// A training loop diverged.
    Training { step: usize, detail: String },
    /// A pipeline stage failed.
    Stage { stage: &'static str, source: Box<Error> },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn argument(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Argument { what, detail: detail.into() }
    }

    /// Wraps `self` with the label of the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage { stage, source: Box::new(self) }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape error in {op}: {detail}"),
            Error::Provenance => f.write_str("variable was not recorded on this tape"),
            Error::NonFinite { context } => write!(f, "non-finite value in {context}"),
            Error::Argument { what, detail } => write!(f, "invalid {what}: {detail}"),
            Error::UnknownTag(tag) => write!(f, "unknown tag {tag:?}"),
            Error::DegenerateGuidance => f.write_str("projection base has (near) zero norm"),
            Error::UndefinedSimilarity => f.write_str("cosine similarity of a zero vector"),
            Error::Training { step, detail } => write!(f, "training diverged at step {step}: {detail}"),
            Error::Stage { stage, source } => write!(f, "stage {stage} failed: {source}"),
        }
    }
}

impl core::error::Error for Error {
    fn source(&self) -> Option<&(dyn core::error::Error + 'static)> {
        match self {
            Error::Stage { source, .. } => Some(source.as_ref()),
            _ => None,
        }
    }
}

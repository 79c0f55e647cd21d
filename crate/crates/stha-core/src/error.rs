use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("video has {frames} frames but a window of {window} needs at least {needed}")]
    VideoTooShort {
        frames: usize,
        window: usize,
        needed: usize,
    },

    #[error("pattern bank is empty")]
    EmptyBank,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown tolerance degree {degree}; available degrees: {available:?}")]
    UnknownDegree { degree: u32, available: Vec<u32> },

    #[error("every stack of stream {stream} is masked")]
    AllStacksMasked { stream: usize },

    #[error("labels of {split} contain a single class; AUC is undefined")]
    SingleClassLabels { split: String },

    #[error("score series lengths differ: {left} vs {right}")]
    MisalignedSeries { left: usize, right: usize },

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {diagnostics}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        diagnostics: String,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn ensure_shape(
    context: &'static str,
    expected: &[usize],
    actual: &[usize],
) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            context,
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        })
    }
}

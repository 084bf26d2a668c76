use thiserror::Error;

/// Errors raised anywhere in the fusion pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("computation record already consumed by a backward pass")]
    RecordConsumed,

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("backward root {0} does not belong to this record")]
    ForeignRoot(usize),

    #[error("parameters of `{0}` are frozen")]
    Frozen(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("non-finite value {value} during {context}")]
    NonFinite { context: String, value: f64 },

    #[error("image of {h}x{w} is smaller than the {min}x{min} minimum")]
    TooSmall { h: usize, w: usize, min: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Crc { stored: u32, computed: u32 },

    #[error("unsupported checkpoint version {0}")]
    Version(u32),

    #[error("checkpoint holds a `{found}` module, expected `{expected}`")]
    Module { expected: String, found: String },

    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// True for failures caused by the filesystem or malformed files rather
    /// than by invalid arguments or numerics.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io(_)
                | Error::UnsupportedFormat(_)
                | Error::Format(_)
                | Error::Crc { .. }
                | Error::Version(_)
                | Error::Module { .. }
                | Error::MissingTensor(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // tensor math
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("axis {axis} is invalid for a rank-{rank} tensor")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("cross entropy: every position is masked")]
    AllMasked,
    #[error("target id {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    // checkpoints
    #[error("not an SPLV1 checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated at byte offset {offset}")]
    Truncated { offset: usize },
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    // multispectral container
    #[error("not an MSI1 file (bad magic)")]
    MsiBadMagic,
    #[error("MSI1 payload truncated at byte offset {offset}")]
    MsiTruncated { offset: usize },
    #[error("MSI1 header declares {expected} bytes of payload, found {found}")]
    MsiSizeMismatch { expected: usize, found: usize },
    #[error("non-finite reflectance value at byte offset {offset}")]
    NonFiniteValue { offset: usize },

    // models
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("token id {0} is outside the vocabulary")]
    TokenOutOfRange(u32),
    #[error("sequence of {needed} positions exceeds context length {limit}")]
    ContextOverflow { needed: usize, limit: usize },
    #[error("image placeholder/token mismatch: {0}")]
    ImageSplice(String),
    #[error("encoder weights must be frozen for feature extraction")]
    EncoderNotFrozen,
    #[error("image has {found}, expected {expected}")]
    ImageShape { expected: String, found: String },

    // data pipeline
    #[error("invalid percentile stretch ({lo}, {hi})")]
    InvalidStretch { lo: f64, hi: f64 },
    #[error("invalid band mapping: {0}")]
    BandMapping(String),
    #[error(
        "cannot place {classes} class signatures {margin} apart in {bands} bands; use fewer classes or more bands"
    )]
    SignatureMargin { classes: usize, bands: usize, margin: f32 },
    #[error("caption request timed out")]
    CaptionTimeout,
    #[error("captioner returned HTTP {0}")]
    CaptionStatus(u16),
    #[error("malformed captioner response: {0}")]
    CaptionMalformed(String),
    #[error("captioner failed after {attempts} attempts: {last}")]
    RetryExhausted { attempts: u32, last: Box<Error> },
    #[error("caption transport error: {0}")]
    CaptionTransport(String),
    #[error("dataset error: {0}")]
    Dataset(String),

    // training
    #[error("frozen-weight contract violated: {0}")]
    FrozenViolation(String),
    #[error("non-finite loss on sample `{0}`")]
    NonFiniteLoss(String),
    #[error("sample `{id}` needs {needed} positions, context is {limit}")]
    SampleOverflow { id: String, needed: usize, limit: usize },

    // evaluation
    #[error("class {class} is absent from a training fold; use a larger ratio or a different seed")]
    ClassAbsent { class: usize },
    #[error("features have zero variance")]
    ZeroVariance,
    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("image encoding: {0}")]
    Image(String),
}

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}

use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the toolkit can report.
///
/// Variants are grouped by the kind of problem so that front ends can map
/// them to exit codes with [`Error::class`].
#[derive(Debug, Error)]
pub enum Error {
    // -- filter bank --
    #[error("unsupported band count {0} (expected 4 or 8)")]
    UnsupportedBandCount(usize),
    #[error("prototype design failed: best reconstruction SNR {snr_db:.2} dB is below {target_db} dB")]
    DesignFailure { snr_db: f64, target_db: f64 },
    #[error("length {len} is not a multiple of {multiple}")]
    FrameAlignment { len: usize, multiple: usize },
    #[error("sample rate mismatch: expected {expected} Hz, got {actual} Hz")]
    RateMismatch { expected: u32, actual: u32 },
    #[error("band count mismatch: expected {expected}, got {actual}")]
    BandCountMismatch { expected: usize, actual: usize },

    // -- features --
    #[error("analysis window has {actual} samples, expected {expected}")]
    WindowLengthMismatch { expected: usize, actual: usize },

    // -- tensors and graphs --
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("interpolating {len} steps by {num}/{den} does not give an integral length")]
    NonIntegralOutputLength { len: usize, num: usize, den: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalarLoss(Vec<usize>),
    #[error("loss does not depend on any tensor that requires gradients")]
    GraphDetached,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("stream state has no buffer for layer `{0}`")]
    UninitializedState(String),

    // -- containers --
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("weight table does not match architecture: {0}")]
    ShapeTableMismatch(String),
    #[error("file truncated while reading {0}")]
    TruncatedFile(&'static str),
    #[error("code {0} does not fit in 4 bits")]
    CodeOutOfRange(u8),
    #[error("header announces {header} frames but payload holds {payload} bytes")]
    LengthMismatch { header: usize, payload: usize },
    #[error("index {index} out of range (limit {limit})")]
    IndexOutOfRange { index: usize, limit: usize },

    // -- pipeline consistency --
    #[error("side-info carries {bitstream} frames but the audio has {audio}")]
    FrameCountMismatch { bitstream: usize, audio: usize },

    // -- training --
    #[error("spectral convergence undefined for an all-zero reference")]
    ZeroReference,
    #[error("expected {expected} discriminator outputs, got {actual}")]
    WrongEnsembleSize { expected: usize, actual: usize },
    #[error("clip has {len} samples; need at least {min}")]
    ClipTooShort { len: usize, min: usize },
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),

    // -- audio files --
    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),
    #[error("expected mono audio, found {0} channels")]
    NotMono(u16),
    #[error("corrupt WAV header: {0}")]
    CorruptHeader(String),
    #[error("empty signal")]
    EmptySignal,

    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Coarse classification used by command-line front ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Malformed or unsupported input files.
    Format,
    /// Inputs that are individually valid but disagree with each other.
    Consistency,
    /// Anything else (I/O, numerical failures).
    Runtime,
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        use Error::*;
        match self {
            BadMagic { .. }
            | UnsupportedVersion(_)
            | ShapeTableMismatch(_)
            | TruncatedFile(_)
            | CodeOutOfRange(_)
            | LengthMismatch { .. }
            | UnsupportedFormat(_)
            | NotMono(_)
            | CorruptHeader(_)
            | InvalidConfig(_) => ErrorClass::Format,
            FrameCountMismatch { .. }
            | RateMismatch { .. }
            | FrameAlignment { .. }
            | BandCountMismatch { .. } => ErrorClass::Consistency,
            _ => ErrorClass::Runtime,
        }
    }
}

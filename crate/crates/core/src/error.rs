use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed WAV: {0}")]
    Format(String),

    #[error("unsupported WAV codec {0} (only PCM = 1 is supported)")]
    UnsupportedCodec(u16),

    #[error("unsupported bit depth {0} (only 16-bit PCM is supported)")]
    UnsupportedBitDepth(u16),

    #[error("unsupported resampling ratio {from} Hz -> {to} Hz (source rate must be an integer multiple of the target)")]
    UnsupportedRatio { from: u32, to: u32 },

    #[error("clip too short: {len} samples, need at least {needed}")]
    TooShort { len: usize, needed: usize },

    #[error("FFT length {0} is not a power of two")]
    Size(usize),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("malformed model file: {0}")]
    Model(String),

    #[error("not a model file (bad magic)")]
    NotAModel,

    #[error("unsupported model format version {found} (this build reads version {supported})")]
    Version { found: u32, supported: u32 },

    #[error("model file corrupted: parameter CRC {actual:08x} does not match stored {expected:08x}")]
    Corrupt { expected: u32, actual: u32 },

    #[error("alert sink error: {0}")]
    Sink(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Why a checkpoint or train-state file was rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointFault {
    BadMagic,
    UnsupportedVersion(u32),
    CrcMismatch,
    Truncated,
    LengthMismatch,
    InvalidHeader,
}

impl std::fmt::Display for CheckpointFault {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CheckpointFault::BadMagic => write!(f, "bad magic bytes"),
            CheckpointFault::UnsupportedVersion(v) => write!(f, "unsupported format version {v}"),
            CheckpointFault::CrcMismatch => write!(f, "CRC32 mismatch"),
            CheckpointFault::Truncated => write!(f, "file truncated"),
            CheckpointFault::LengthMismatch => write!(f, "payload length does not match architecture"),
            CheckpointFault::InvalidHeader => write!(f, "invalid header fields"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("patch size {patch} exceeds image dimensions {height}x{width}")]
    PatchTooLarge { patch: usize, height: usize, width: usize },
    #[error("augmentation needs a square patch, got {height}x{width}")]
    NonSquarePatch { height: usize, width: usize },
    #[error("image too small: {height}x{width}, need at least {min}x{min}")]
    ImageTooSmall { height: usize, width: usize, min: usize },
    #[error("invalid noise specification: {0}")]
    InvalidNoise(String),
    #[error("invalid degradation specification: {0}")]
    InvalidDegrade(String),
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("gradient tape does not match the model it is replayed against")]
    StaleTape,
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("bad checkpoint {path}: {fault}")]
    BadCheckpoint { path: PathBuf, fault: CheckpointFault },
    #[error("no usable images in {0}")]
    EmptyDataset(PathBuf),
    #[error("loss diverged at epoch {epoch}, step {step}: {detail}")]
    DivergedLoss { epoch: usize, step: usize, detail: String },
    #[error("insufficient samples: {got} (need at least {min})")]
    InsufficientSamples { got: usize, min: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

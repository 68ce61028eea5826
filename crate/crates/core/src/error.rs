use std::io;
use std::path::PathBuf;

use basisconv_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("{what}: bad magic number {found:#x}")]
    BadMagic { what: String, found: u64 },
    #[error("{what}: format version {found}, expected {expected}")]
    VersionMismatch { what: String, found: u32, expected: u32 },
    #[error("{what}: checksum mismatch")]
    ChecksumMismatch { what: String },
    #[error("{what}: truncated record")]
    Truncated { what: String },
    #[error("{what}: {reason}")]
    Format { what: String, reason: String },
    #[error("mixed group orders {0} and {1}")]
    MixedOrder(usize, usize),
    #[error("{op}: spatial extent {h}x{w} is not square")]
    NotSquare { op: &'static str, h: usize, w: usize },
    #[error("{op}: orientation axis has extent {got}, expected {expected}")]
    OrientationExtent { op: &'static str, expected: usize, got: usize },
    #[error("group order {0} is not divisible by 4")]
    OrderNotQuarterDivisible(usize),
    #[error("rotation {r} of order {order} is not a multiple of a quarter turn")]
    NotQuarterTurn { r: usize, order: usize },
    #[error("partial basis slot {slot} is not an exact quarter turn of slot {source_slot}")]
    PartialInvariant { slot: usize, source_slot: usize },
    #[error("basis element {element} at orientation {slot} is identically zero")]
    DegenerateElement { slot: usize, element: usize },
    #[error("basis fingerprint {found} does not match expected {expected}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    Divergence { epoch: usize, step: usize, detail: String },
    #[error("empty dataset")]
    EmptySet,
    #[error("requested {requested} items from a set of {available}")]
    SubsetTooLarge { requested: usize, available: usize },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        let path = path.into();
        if source.kind() == io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }
}

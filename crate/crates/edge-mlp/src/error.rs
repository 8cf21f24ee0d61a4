//! Error type shared by the whole toolkit.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure class, used by callers (e.g. the CLI) to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Malformed, missing, or inconsistent input data.
    Data,
    /// Numeric failure (non-finite values, domain violations, divergence).
    Numeric,
    /// Misuse of an API by the caller (shape mismatches, bad parameters).
    Usage,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    // ---- IDX / dataset ingestion ----
    #[error("unknown IDX magic 0x{0:08x}")]
    UnknownMagic(u32),
    #[error("truncated IDX payload: header declares {expected} bytes, {available} available")]
    TruncatedPayload { expected: usize, available: usize },
    #[error("{extra} trailing bytes after IDX payload")]
    TrailingBytes { extra: usize },
    #[error("missing data file: {0} (tried plain and .gz variants)")]
    MissingFile(PathBuf),
    #[error("label {label} at index {index} outside [0, {class_count})")]
    LabelOutOfRange {
        index: usize,
        label: i64,
        class_count: usize,
    },
    #[error("class {class} has {count} samples, too few to stratify")]
    DegenerateClass { class: usize, count: usize },
    #[error("inconsistent dataset: {0}")]
    InvalidDataset(String),

    // ---- feature extraction ----
    #[error("non-finite input value at pixel ({row}, {col})")]
    NonFiniteInput { row: usize, col: usize },
    #[error("image {index}: {source}")]
    ImageError {
        index: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("bad feature cache: {0}")]
    CacheFormat(String),

    // ---- tensor substrate ----
    #[error("dimension mismatch in {op}: ({lr}x{lc}) vs ({rr}x{rc})")]
    DimensionMismatch {
        op: &'static str,
        lr: usize,
        lc: usize,
        rr: usize,
        rc: usize,
    },
    #[error("domain error in {op}: {detail}")]
    DomainError { op: &'static str, detail: String },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    // ---- model / training ----
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("train-mode batch of {rows} rows; batch statistics need at least 2")]
    BatchTooSmall { rows: usize },
    #[error("forward cache does not match this model")]
    StaleCache,
    #[error("callback called with epoch {got}, expected {expected}")]
    OutOfOrderEpoch { expected: u32, got: u32 },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: u32, batch: usize },
    #[error("model expects {model} classes but data has {data}")]
    ClassCountMismatch { model: usize, data: usize },
    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    // ---- persistence / CLI surfaces ----
    #[error("bad magic in {what}")]
    BadMagic { what: &'static str },
    #[error("unsupported model file version {0}")]
    VersionUnsupported(u16),
    #[error("payload checksum mismatch (file corrupted?)")]
    ChecksumMismatch,
    #[error("bad image shape: expected {expected}, got {got}")]
    BadImageShape { expected: String, got: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Classify the error for exit-code mapping.
    pub fn kind(&self) -> ErrorKind {
        use Error::*;
        match self {
            UnknownMagic(_)
            | TruncatedPayload { .. }
            | TrailingBytes { .. }
            | MissingFile(_)
            | LabelOutOfRange { .. }
            | DegenerateClass { .. }
            | InvalidDataset(_)
            | CacheFormat(_)
            | ClassCountMismatch { .. }
            | EmptyDataset(_)
            | BadMagic { .. }
            | VersionUnsupported(_)
            | ChecksumMismatch
            | BadImageShape { .. }
            | Io(_) => ErrorKind::Data,
            NonFiniteInput { .. } | DomainError { .. } | NonFiniteLoss { .. } => ErrorKind::Numeric,
            ImageError { source, .. } => source.kind(),
            DimensionMismatch { .. }
            | InvalidParameter(_)
            | ShapeMismatch(_)
            | BatchTooSmall { .. }
            | StaleCache
            | OutOfOrderEpoch { .. } => ErrorKind::Usage,
        }
    }
}

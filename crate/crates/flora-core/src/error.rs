//! Crate-wide error type.
//!
//! Variants are grouped by failure class so the CLI can map them onto exit
//! codes without string matching: configuration/usage problems, data and
//! format problems, and numeric failures.

use thiserror::Error;

/// Coarse failure class used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad invocation or configuration value.
    Usage,
    /// Unreadable, malformed, or inconsistent input data.
    Data,
    /// Numeric breakdown (non-finite values, failed numeric contract).
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    // ── configuration ────────────────────────────────────────────────
    #[error("invalid configuration: {0}")]
    Config(String),

    // ── tensors and tape ─────────────────────────────────────────────
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("backward requires a scalar loss, got {numel} elements")]
    NonScalarLoss { numel: usize },
    #[error("tape value v{id} was written after an operation consuming it was recorded")]
    MutatedAfterRecord { id: usize },
    #[error("numeric failure: {0}")]
    Numeric(String),

    // ── optimizer ────────────────────────────────────────────────────
    #[error("optimizer state mismatch: {0}")]
    Optimizer(String),

    // ── io ───────────────────────────────────────────────────────────
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    // ── feature packs ────────────────────────────────────────────────
    #[error("bad feature pack magic: expected \"FLORAFPK\", found {found:?}")]
    PackBadMagic { found: [u8; 8] },
    #[error("unsupported feature pack version {found} (supported: 1)")]
    PackVersion { found: u32 },
    #[error("invalid feature pack kind {found} (0 = skeleton, 1 = semantic)")]
    PackKind { found: u32 },
    #[error("feature pack header field {field} is zero")]
    PackZeroExtent { field: &'static str },
    #[error("feature pack truncated: need {expected} bytes, found {actual}")]
    PackTruncated { expected: usize, actual: usize },
    #[error("feature pack has {extra} trailing bytes after payload")]
    PackTrailingBytes { extra: usize },
    #[error("non-finite feature value at flat index {index}")]
    PackNonFinite { index: usize },
    #[error("invalid feature pack labels: {0}")]
    PackLabels(String),

    // ── splits ───────────────────────────────────────────────────────
    #[error("malformed split file: {0}")]
    SplitParse(String),
    #[error("invalid split: {0}")]
    SplitInvalid(String),
    #[error("split/pack mismatch: {0}")]
    SplitPackMismatch(String),

    // ── checkpoints ──────────────────────────────────────────────────
    #[error("bad checkpoint magic: expected \"FLORACKP\", found {found:?}")]
    CkptBadMagic { found: [u8; 8] },
    #[error("unsupported checkpoint version {found} (supported: 1)")]
    CkptVersion { found: u32 },
    #[error("checkpoint truncated while reading {0}")]
    CkptTruncated(String),
    #[error("checkpoint has {extra} trailing bytes after last block")]
    CkptTrailingBytes { extra: usize },
    #[error("duplicate checkpoint block {0:?}")]
    CkptDuplicateBlock(String),
    #[error("checkpoint block mismatch: {0}")]
    CkptBlockMismatch(String),

    // ── model / pipeline state ───────────────────────────────────────
    #[error("stage-2 training requires a frozen alignment model")]
    VaeNotFrozen,
    #[error("model is frozen: {0}")]
    ModelFrozen(String),
    #[error("evaluation input invalid: {0}")]
    Evaluation(String),
}

impl Error {
    /// Wrap an io error with the path it occurred on.
    pub fn io_at(path: &std::path::Path, e: std::io::Error) -> Error {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    }

    /// Failure class for exit-code mapping.
    pub fn class(&self) -> ErrorClass {
        use Error::*;
        match self {
            Config(_) => ErrorClass::Usage,
            Shape(_) | NonFinite(_) | NonScalarLoss { .. } | MutatedAfterRecord { .. }
            | Numeric(_) | Optimizer(_) => ErrorClass::Numeric,
            Io(_) | PackBadMagic { .. } | PackVersion { .. } | PackKind { .. }
            | PackZeroExtent { .. } | PackTruncated { .. } | PackTrailingBytes { .. }
            | PackNonFinite { .. } | PackLabels(_) | SplitParse(_) | SplitInvalid(_)
            | SplitPackMismatch(_) | CkptBadMagic { .. } | CkptVersion { .. }
            | CkptTruncated(_) | CkptTrailingBytes { .. } | CkptDuplicateBlock(_)
            | CkptBlockMismatch(_) | Evaluation(_) => ErrorClass::Data,
            VaeNotFrozen | ModelFrozen(_) => ErrorClass::Usage,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

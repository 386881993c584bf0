use std::path::PathBuf;

/// Errors raised by the geometry, rendering, loss and I/O routines.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    #[error("degenerate projection: camera-frame depth {0:e} is within 1e-9 of zero")]
    DegenerateProjection(f64),
    #[error("invalid depth {0}: unprojection requires d > 0")]
    InvalidDepth(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid extrinsics: {0}")]
    InvalidExtrinsics(String),
    #[error("singular view angle: |cos(theta)| <= 1e-9 (theta = {0})")]
    SingularView(f64),
    #[error("degenerate bias: biased depth denominator {0:e} is within 1e-9 of zero")]
    DegenerateBias(f64),
    #[error("outside the closed-form validity domain: {0}")]
    OutsideValidityDomain(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("invalid weights: lambda_s = {lambda_s}, lambda_t = {lambda_t}")]
    InvalidWeights { lambda_s: f64, lambda_t: f64 },
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("wrong arity: expected {expected} true-positive errors, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("scene spec is overcrowded: placement failed after {0} rejections")]
    Overcrowded(usize),
    #[error("unsupported format version {found} (supported major: {supported})")]
    FormatVersion { found: String, supported: u32 },
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("I/O error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad user input (as opposed to internal failures).
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Io { .. } | Error::DegenerateProjection(_) | Error::DegenerateBias(_) | Error::IndexOutOfRange(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

//! Error type shared across the crate.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Tensor dimensions do not line up; `detail` names the offending axis.
    Shape { op: &'static str, detail: String },
    /// A kernel with (numerically) zero norm cannot be normalized.
    ZeroNormKernel { index: usize },
    /// A non-finite value appeared mid-computation.
    NonFinite { op: &'static str, iteration: usize },
    /// Solver state blew up past the divergence guard.
    Divergence { iteration: usize, max_abs: f64 },
    /// CEL0 thresholding needs one kernel norm per feature map.
    MissingKernelNorms,
    /// Invalid configuration or parameter value.
    Config(String),
    /// Malformed file contents (bad magic, truncation, mismatched fingerprint, ...).
    Format(String),
    Io(std::io::Error),
}

impl Error {
    /// Stable machine-readable tag, used by the CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::ZeroNormKernel { .. } => "zero_norm_kernel",
            Error::NonFinite { .. } => "non_finite",
            Error::Divergence { .. } => "divergence",
            Error::MissingKernelNorms => "missing_kernel_norms",
            Error::Config(_) => "config",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "{op}: dimension mismatch: {detail}"),
            Error::ZeroNormKernel { index } => {
                write!(f, "kernel {index} has zero norm and cannot be normalized")
            }
            Error::NonFinite { op, iteration } => {
                write!(f, "{op}: non-finite value at iteration {iteration}")
            }
            Error::Divergence { iteration, max_abs } => write!(
                f,
                "solver diverged at iteration {iteration} (max |u| = {max_abs:.3e})"
            ),
            Error::MissingKernelNorms => {
                write!(f, "cel0 thresholding requires per-feature kernel norms")
            }
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(format!("json: {e}"))
    }
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Format(format!("image: {e}"))
    }
}

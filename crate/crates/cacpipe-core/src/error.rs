//! Error type shared by the core algorithms.

use alloc::string::String;
use core::fmt;

/// Errors produced by the core pipeline algorithms.
///
/// Variants are grouped by how the caller should react: `Invalid*` means the
/// inputs violate a documented precondition, `Degenerate` means the data admit
/// no meaningful answer, and `Diverged` means an iterative computation left the
/// finite range and the run must stop.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Inputs violate a documented precondition (shape, range, emptiness).
    InvalidInput(String),
    /// A geometric operation is undefined (singular matrix, empty slice range).
    InvalidGeometry(String),
    /// The data admit no meaningful statistic (zero variance, one category).
    Degenerate(String),
    /// Training or inference produced a non-finite value.
    Diverged(String),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::InvalidInput(m) => write!(f, "invalid input: {m}"),
            CoreError::InvalidGeometry(m) => write!(f, "invalid geometry: {m}"),
            CoreError::Degenerate(m) => write!(f, "degenerate data: {m}"),
            CoreError::Diverged(m) => write!(f, "numeric divergence: {m}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for CoreError {}

/// Convenience alias used throughout the crate.
pub type Result<T> = core::result::Result<T, CoreError>;

/// Shorthand constructors keep call sites terse.
impl CoreError {
    pub fn invalid(msg: impl fmt::Display) -> Self {
        CoreError::InvalidInput(alloc::format!("{msg}"))
    }
    pub fn geometry(msg: impl fmt::Display) -> Self {
        CoreError::InvalidGeometry(alloc::format!("{msg}"))
    }
    pub fn degenerate(msg: impl fmt::Display) -> Self {
        CoreError::Degenerate(alloc::format!("{msg}"))
    }
    pub fn diverged(msg: impl fmt::Display) -> Self {
        CoreError::Diverged(alloc::format!("{msg}"))
    }
}

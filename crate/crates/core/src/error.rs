//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch at node {node}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, node: usize, lhs: [usize; 2], rhs: [usize; 2] },

    #[error("{op}: {msg}")]
    InvalidArg { op: &'static str, msg: String },

    #[error("backward: loss node {node} has shape {shape:?}, expected a scalar")]
    NonScalarLoss { node: usize, shape: [usize; 2] },

    #[error("non-finite values in {what}")]
    NonFinite { what: String },

    #[error("token_alignment: zero-norm token at row {index} of the {side} matrix")]
    ZeroNormToken { side: &'static str, index: usize },

    #[error("cost_from_alignment: entry ({row},{col}) = {value} outside [-1,1]")]
    CosineOutOfRange { row: usize, col: usize, value: f64 },

    #[error("exact_ot_bruteforce: instance {rows}x{cols} too large (limit: square N<=8 uniform, or rows*cols<=12)")]
    BruteForceTooLarge { rows: usize, cols: usize },

    #[error("file format: bad magic {found:?} at byte {offset} (expected {expected:?})")]
    BadMagic { expected: [u8; 4], found: [u8; 4], offset: u64 },

    #[error("file format: unsupported version {found} at byte {offset}")]
    BadVersion { found: u32, offset: u64 },

    #[error("file format: truncated at byte {offset} ({context})")]
    Truncated { offset: u64, context: String },

    #[error("file format: {msg} at byte {offset}")]
    Corrupt { offset: u64, msg: String },

    #[error("manifest: {msg}")]
    Manifest { msg: String },

    #[error("checkpoint incompatible: {msg}")]
    Incompatible { msg: String },

    #[error("config: {msg}")]
    Config { msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

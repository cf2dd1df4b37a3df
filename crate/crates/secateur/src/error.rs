use std::fmt;

/// Crate-wide error type. Every fallible operation returns one of these
/// variants with enough context to name the offending dimension, file
/// offset, or version.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A tensor or layer dimension did not match what the operation expects.
    ShapeMismatch {
        op: &'static str,
        dimension: &'static str,
        expected: usize,
        actual: usize,
    },
    /// A structural problem in a layer graph (cycle, dangling edge, bad gate group).
    InvalidGraph { reason: String },
    /// A mask set does not cover the graph's gate groups, or covers them
    /// with the wrong width or batch size.
    MaskMismatch { reason: String },
    /// A backward pass was handed a cache from a different forward call.
    StaleCache { reason: String },
    /// A class label lies outside `[0, class_count)`.
    LabelOutOfRange { label: usize, class_count: usize },
    /// Exhaustive enumeration was requested over too many gated channels.
    TooManyChannels { total: usize, limit: usize },
    /// A resource budget cannot be met even at one kept channel per group.
    UnsatisfiableConstraint {
        constraint: String,
        floor: u64,
    },
    /// Ablation or similar was asked for more channels than exist.
    IndexOutOfRange {
        what: &'static str,
        value: usize,
        limit: usize,
    },
    /// An empty input where at least one element is required.
    EmptyInput { what: &'static str },
    /// Binary dataset parsing failed at a specific byte offset.
    DatasetFormat { offset: usize, reason: String },
    /// A checkpoint or graph document carries an unsupported version.
    VersionMismatch { expected: u32, actual: u32 },
    /// Underlying I/O failure.
    Io { path: String, reason: String },
    /// JSON (de)serialization failure.
    Json { reason: String },
    /// Invalid configuration value.
    Config { reason: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ShapeMismatch {
                op,
                dimension,
                expected,
                actual,
            } => write!(
                f,
                "{op}: {dimension} mismatch, expected {expected}, got {actual}"
            ),
            Self::InvalidGraph { reason } => write!(f, "invalid graph: {reason}"),
            Self::MaskMismatch { reason } => write!(f, "mask mismatch: {reason}"),
            Self::StaleCache { reason } => write!(f, "stale forward cache: {reason}"),
            Self::LabelOutOfRange { label, class_count } => {
                write!(f, "label {label} out of range for {class_count} classes")
            }
            Self::TooManyChannels { total, limit } => write!(
                f,
                "exact enumeration infeasible: {total} gated channels exceeds limit {limit}"
            ),
            Self::UnsatisfiableConstraint { constraint, floor } => write!(
                f,
                "constraint {constraint} unsatisfiable: floor at one channel per group is {floor}"
            ),
            Self::IndexOutOfRange { what, value, limit } => {
                write!(f, "{what} {value} out of range (limit {limit})")
            }
            Self::EmptyInput { what } => write!(f, "{what} must not be empty"),
            Self::DatasetFormat { offset, reason } => {
                write!(f, "dataset parse error at offset {offset}: {reason}")
            }
            Self::VersionMismatch { expected, actual } => {
                write!(f, "unsupported format version {actual}, this build reads {expected}")
            }
            Self::Io { path, reason } => write!(f, "io error on {path}: {reason}"),
            Self::Json { reason } => write!(f, "json error: {reason}"),
            Self::Config { reason } => write!(f, "invalid config: {reason}"),
        }
    }
}

impl std::error::Error for Error {}

pub type Result<T> = std::result::Result<T, Error>;

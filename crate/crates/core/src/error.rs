//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("not a NIfTI-1 single file: {0}")]
    Format(String),

    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),

    #[error("corrupt NIfTI file: {0}")]
    CorruptFile(String),

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("label {label} out of range for label count {label_count}")]
    LabelRange { label: u32, label_count: usize },

    #[error("invalid interpolation: {0}")]
    InvalidInterp(String),

    #[error("transform is singular (|det| = {0:e})")]
    SingularTransform(f64),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("optimization failed: {0}")]
    OptimizationFailure(String),

    #[error("zero intensity variance")]
    ZeroVariance,

    #[error("empty mask")]
    EmptyMask,

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("invalid lattice: {0}")]
    InvalidLattice(String),

    #[error("lattice leaves a coverage gap on axis {axis}: {count} x {size} < {dim}")]
    CoverageGap {
        axis: usize,
        count: usize,
        size: usize,
        dim: usize,
    },

    #[error("sub-space out of bounds: {0}")]
    Bounds(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("undefined distance: {0}")]
    UndefinedDistance(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("plugin failed on tile {tile_index} ({}): {stderr}", describe_exit(.exit_code))]
    PluginFailure {
        tile_index: usize,
        exit_code: Option<i32>,
        stderr: String,
    },

    #[error("plugin timed out on tile {tile_index} after {seconds} s")]
    PluginTimeout { tile_index: usize, seconds: f64 },

    #[error("plugin protocol violation on tile {tile_index}: {reason}")]
    ProtocolViolation { tile_index: usize, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("pre-hook failed ({}): {stderr}", describe_exit(.exit_code))]
    HookFailure { exit_code: Option<i32>, stderr: String },

    #[error("model directory error: {0}")]
    Model(String),

    #[error("stage `{stage}` failed{}: {source}", tile.map(|t| format!(" on tile {t}")).unwrap_or_default())]
    Stage {
        stage: &'static str,
        tile: Option<usize>,
        #[source]
        source: Box<Error>,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            tile: None,
            source: Box::new(self),
        }
    }

    pub(crate) fn in_tile(self, stage: &'static str, tile: usize) -> Self {
        Error::Stage {
            stage,
            tile: Some(tile),
            source: Box::new(self),
        }
    }

    /// Process exit code used by the CLI for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Model(_) | Error::InvalidArgument(_) => 2,
            Error::Stage { source, .. } => match source.as_ref() {
                Error::Config(_) | Error::Model(_) => 2,
                _ => 3,
            },
            _ => 3,
        }
    }
}

fn describe_exit(code: &Option<i32>) -> String {
    match code {
        Some(c) => format!("exit code {c}"),
        None => "no exit code".to_string(),
    }
}

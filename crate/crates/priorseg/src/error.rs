//! Error types shared across the pipeline.

use std::path::PathBuf;
use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corrupt header in {path}: {reason}")]
    CorruptHeader { path: PathBuf, reason: String },

    #[error("multi-channel volume in {path}: expected a single-channel volume, dim[4] = {channels}")]
    MultiChannel { path: PathBuf, channels: usize },

    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("residual value {value} out of [-1, 1] at voxel ({x}, {y}, {z})")]
    ResidualOutOfRange { value: f32, x: usize, y: usize, z: usize },

    #[error("unpaired files for case '{case_id}': missing {missing}")]
    UnpairedCase { case_id: String, missing: String },

    #[error("duplicate case id '{0}'")]
    DuplicateCase(String),

    #[error("phantom generation failed: {0}")]
    Phantom(String),

    #[error("mask generation failed: {0}")]
    MaskGen(String),

    #[error("pathological slice in inpainter training set: case '{case_id}' slice z={z_index} has a nonzero label plane")]
    TrainingLeak { case_id: String, z_index: usize },

    #[error("fold leakage: case '{0}' appears in both the training and validation sets")]
    FoldLeak(String),

    #[error("network is untrained; run training or load a checkpoint first")]
    UntrainedNetwork,

    #[error("checkpoint error in {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("prior cache at {path} was built with a different configuration: {reason}; rerun with --force to rebuild")]
    StaleCache { path: PathBuf, reason: String },

    #[error("missing residual volumes for case '{case_id}'; run compute-priors first")]
    MissingResiduals { case_id: String },

    #[error("configuration invalid:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    #[error("stage '{stage}' requires {artifact}, produced by stage '{produced_by}'")]
    MissingDependency {
        stage: String,
        artifact: String,
        produced_by: String,
    },

    #[error("{0}")]
    Other(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Stable machine-readable tag for the CLI's JSON error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::CorruptHeader { .. } => "corrupt_header",
            Error::MultiChannel { .. } => "multi_channel",
            Error::Invariant(_) => "invariant",
            Error::GridMismatch(_) => "grid_mismatch",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::DegenerateInput(_) => "degenerate_input",
            Error::ResidualOutOfRange { .. } => "residual_out_of_range",
            Error::UnpairedCase { .. } => "unpaired_case",
            Error::DuplicateCase(_) => "duplicate_case",
            Error::Phantom(_) => "phantom",
            Error::MaskGen(_) => "mask_gen",
            Error::TrainingLeak { .. } => "training_leak",
            Error::FoldLeak(_) => "fold_leak",
            Error::UntrainedNetwork => "untrained_network",
            Error::Checkpoint { .. } => "checkpoint",
            Error::StaleCache { .. } => "stale_cache",
            Error::MissingResiduals { .. } => "missing_residuals",
            Error::Config(_) => "config",
            Error::MissingDependency { .. } => "missing_dependency",
            Error::Other(_) => "other",
        }
    }
}

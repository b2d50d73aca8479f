use std::path::PathBuf;

/// Crate-wide error type. Variants carry enough context to print a useful
/// one-line diagnosis; [`Error::kind`] gives a stable machine-readable tag.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid cycle config: {0}")]
    InvalidCycle(String),

    #[error("invalid hyperparameter: {0}")]
    InvalidHyperParam(String),

    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op}: spatial dims must be even, got {h}x{w}")]
    OddSpatialDims { op: &'static str, h: usize, w: usize },

    #[error("batch norm needs at least 2 values per channel in training mode, got {count}")]
    DegenerateBatch { count: usize },

    #[error("label {label} out of range for {classes} classes at index {index}")]
    LabelOutOfRange {
        label: usize,
        classes: usize,
        index: usize,
    },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("backward requires a loss produced by a recorded operation")]
    DetachedLoss,

    #[error("non-finite loss encountered in {context}")]
    NonFiniteLoss { context: String },

    #[error("tensor file {path}: {detail}")]
    TensorFormat { path: PathBuf, detail: String },

    #[error("invalid model spec: {0}")]
    InvalidModelSpec(String),

    #[error("compression of {channels} channels by factor {factor} is not integral")]
    CompressionIndivisible { channels: usize, factor: usize },

    #[error("invalid phantom config: {0}")]
    InvalidPhantomConfig(String),

    #[error("dataset at {path}: {detail}")]
    DatasetFormat { path: PathBuf, detail: String },

    #[error("invalid experiment config: {0}")]
    InvalidExperiment(String),

    #[error(
        "training diverged: non-finite loss at iteration {iteration} (lr={lr}, mr={mr})"
    )]
    TrainDiverged { iteration: usize, lr: f64, mr: f64 },

    #[error("checkpoint at {path}: {detail}")]
    CheckpointFormat { path: PathBuf, detail: String },

    #[error("config file {path}: {detail}")]
    ConfigParse { path: PathBuf, detail: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable tag for machine-readable error reporting (CLI failure lines).
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidCycle(_) => "invalid_cycle",
            Error::InvalidHyperParam(_) => "invalid_hyperparam",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::OddSpatialDims { .. } => "odd_spatial_dims",
            Error::DegenerateBatch { .. } => "degenerate_batch",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::NonScalarLoss { .. } => "non_scalar_loss",
            Error::DetachedLoss => "detached_loss",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::TensorFormat { .. } => "tensor_format",
            Error::InvalidModelSpec(_) => "invalid_model_spec",
            Error::CompressionIndivisible { .. } => "compression_indivisible",
            Error::InvalidPhantomConfig(_) => "invalid_phantom_config",
            Error::DatasetFormat { .. } => "dataset_format",
            Error::InvalidExperiment(_) => "invalid_experiment",
            Error::TrainDiverged { .. } => "train_diverged",
            Error::CheckpointFormat { .. } => "checkpoint_format",
            Error::ConfigParse { .. } => "config_parse",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

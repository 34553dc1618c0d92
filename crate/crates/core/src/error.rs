use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty softmax")]
    EmptySoftmax,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("variant mismatch: expected {expected}, found {found}")]
    VariantMismatch {
        expected: &'static str,
        found: String,
    },

    #[error("grid must be strictly increasing from 0 to 1: {0}")]
    Grid(String),

    #[error("top-k out of range: k = {k}, len = {len}")]
    TopK { k: usize, len: usize },

    #[error("not a permutation of 0..{len}: {detail}")]
    Permutation { len: usize, detail: String },

    #[error("cost matrix has a non-finite entry at ({row}, {col})")]
    NonFiniteCost { row: usize, col: usize },

    #[error("{n}! permutations is too many to enumerate (n <= {max}); sample permutations instead")]
    TooManyPermutations { n: usize, max: usize },

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("training diverged at step {step} (loss = {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error("runs use different frozen backbones (seed {a} vs {b})")]
    BackboneMismatch { a: u64, b: u64 },

    #[error("accuracies missing from interpolation curve")]
    MissingAccuracy,

    #[error("checkpoint schema version {found} is not supported (expected {expected})")]
    SchemaVersion { found: u64, expected: u64 },

    #[error("malformed document: {0}")]
    Malformed(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("manifest: {0}")]
    Manifest(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

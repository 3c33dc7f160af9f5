//! Laboratory for open-set detection mechanics at desk scale.
//!
//! The crate trains a small cosine-classifier model on synthetic Gaussian
//! clusters while expanding low-density latent regions two ways: an
//! instance-contrastive loss fed by a class-balanced memory bank, and an
//! unknown-probability loss applied to mined hard examples. The evaluation
//! half measures how often unknown objects are absorbed into known classes
//! (wilderness impact, absolute open-set errors) next to the usual
//! closed-set precision metrics.

pub mod bank;
pub mod config;
pub mod eval;
pub mod gradcheck;
pub mod latent;
pub mod losses;
pub mod mining;
pub mod split;
pub mod trainer;

/// Errors shared by every module in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("class index {index} out of range for {num_classes} classes")]
    InvalidClassIndex { index: usize, num_classes: usize },

    #[error("the unknown class (index {0}) can never be a ground-truth label")]
    UnknownGroundTruth(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("iteration {t} lies outside the schedule of {total} iterations")]
    IterationOutOfRange { t: u64, total: u64 },

    #[error("training aborted at iteration {iteration}: {diagnostic}")]
    NonFiniteLoss { iteration: u64, diagnostic: String },

    #[error("proposal {index} is missing its embedding")]
    MissingEmbedding { index: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("evaluation input: {0}")]
    EvalInput(String),

    #[error("split shortfall: requested {requested} {pool} images, only {available} eligible")]
    SplitShortfall {
        pool: &'static str,
        requested: usize,
        available: usize,
    },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

//! Numerical substrate: datasets, shards, mini-batches and loss models with
//! exact gradients.

mod dataset;
mod idx;
mod model;

use thiserror::Error;

pub use dataset::{
    make_synthetic_dataset, partition, sample_batch, sample_node_datasets, Dataset, DatasetKind,
    DatasetSpec, Example, GroundTruth, Label, PartitionMode, Shard,
};
pub use idx::{load_idx, parse_idx, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use model::{
    finite_difference_gradient, LossModel, ModelKind, Quadratic, SoftmaxRegression, TinyMlp,
};

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("cannot split {examples} examples across {nodes} nodes")]
    TooManyShards { nodes: usize, examples: usize },
    #[error("batch size {batch} exceeds the {available} available examples")]
    BatchTooLarge { batch: usize, available: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("label {label:?} not valid for this model")]
    BadLabel { label: Label },
    #[error("bad IDX magic in {file}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        file: &'static str,
        expected: u32,
        found: u32,
    },
    #[error("truncated IDX {file}: need {needed} bytes, have {have}")]
    Truncated {
        file: &'static str,
        needed: usize,
        have: usize,
    },
    #[error("IDX count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = LearnError> = std::result::Result<T, E>;

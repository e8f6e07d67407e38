//! Dataset abstraction, synthetic data, IDX ingestion and non-IID
//! client partitioning.

mod idx;
mod partition;
mod synthetic;

pub use idx::{load_idx, write_idx};
pub use partition::{dirichlet_partition, make_shards, mean_label_entropy, ClientShard, PartitionPlan};
pub use synthetic::generate_synthetic;

use crate::nn::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset must contain at least one sample")]
    Empty,
    #[error("inputs ({inputs}) and labels ({labels}) disagree in length")]
    CountMismatch { inputs: usize, labels: usize },
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: u32, num_classes: usize },
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("class separation must be positive, got {0}")]
    NonPositiveSeparation(f64),
    #[error("input shape must be non-empty with nonzero dims, got {0:?}")]
    BadInputShape(Vec<usize>),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: bad IDX magic 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic {
        path: String,
        found: u32,
        expected: u32,
    },
    #[error("{path}: file truncated")]
    Truncated { path: String },
    #[error("image count {images} does not match label count {labels}")]
    IdxCountMismatch { images: usize, labels: usize },
    #[error("dirichlet concentration must be positive, got {0}")]
    NonPositiveAlpha(f64),
    #[error("need at least one client, got {0}")]
    NoClients(usize),
    #[error("client {client} received {samples} samples (<2) after {retries} re-draws; partition is too small for {num_clients} clients")]
    ShardTooSmall {
        client: usize,
        samples: usize,
        retries: usize,
        num_clients: usize,
    },
    #[error("partition plan does not match dataset: {0}")]
    PlanMismatch(String),
}

/// A labeled dataset: inputs `[N, ...sample_shape]`, one integer label per
/// sample, all labels within `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor<f32>,
    pub labels: Vec<u32>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor<f32>, labels: Vec<u32>, num_classes: usize) -> Result<Self, DataError> {
        if inputs.batch() == 0 {
            return Err(DataError::Empty);
        }
        if inputs.batch() != labels.len() {
            return Err(DataError::CountMismatch {
                inputs: inputs.batch(),
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(DataError::LabelOutOfRange {
                label: bad,
                num_classes,
            });
        }
        Ok(Dataset {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample input shape.
    pub fn sample_shape(&self) -> &[usize] {
        self.inputs.sample_shape()
    }

    /// New dataset from the given sample indices, preserving `num_classes`.
    pub fn subset(&self, indices: &[u32]) -> Dataset {
        let row = self.inputs.numel() / self.len();
        let mut shape = self.inputs.shape().to_vec();
        shape[0] = indices.len();
        let mut data = Vec::with_capacity(indices.len() * row);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let i = i as usize;
            data.extend_from_slice(&self.inputs.data()[i * row..(i + 1) * row]);
            labels.push(self.labels[i]);
        }
        Dataset {
            inputs: Tensor::from_vec(&shape, data),
            labels,
            num_classes: self.num_classes,
        }
    }

    /// Label histogram of length `num_classes`.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0usize; self.num_classes];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }
}

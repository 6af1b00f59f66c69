//! Datasets, synthetic signal generation and result serialization.

pub mod idx;
pub mod records;
pub mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

pub use idx::{load_idx, load_mnist, RawDataset, Standardizer};
pub use records::{MetricRow, ModalRow, Outcome, RunMeta, RunRecord};
pub use synth::{synth_channels, SyntheticBatch, SyntheticSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
}

/// Images with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor4,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor4, labels: Vec<usize>, split: Split) -> Result<Self> {
        if images.batch() != labels.len() {
            return Err(Error::Shape(format!("{} images but {} labels", images.batch(), labels.len())));
        }
        Ok(Dataset { images, labels, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Copies the listed samples.
    pub fn batch(&self, indices: &[usize]) -> (Tensor4, Vec<usize>) {
        (self.images.select(indices), indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (images, labels) = self.batch(&idx);
        Dataset { images, labels, split: self.split }
    }
}

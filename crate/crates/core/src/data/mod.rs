//! Datasets, IDX ingestion, synthetic corpora, splits and batch schedules.

mod batches;
mod idx;
mod splits;
mod synth;

use std::collections::BTreeMap;

pub use batches::{plan_batches, BatchPlan, InnerIterations};
pub use idx::{load_idx, read_idx_images, read_idx_labels, write_idx, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use splits::{make_splits, split_manifest_csv, Splits};
pub use synth::{synth_blobs, synth_digits, GlyphStyle};

use crate::error::{Error, Result};
use crate::models::Network;
use crate::tensor::Tensor;

/// Images `(n, c, h, w)` in `[0, 1]` with ground-truth labels. Ground truth
/// is only used to train surrogates; attacks work from clean predictions,
/// which can be cached per model id.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    clean_predictions: BTreeMap<String, Vec<usize>>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Data(format!(
                "images must be (n, c, h, w), got {:?}",
                images.shape()
            )));
        }
        if images.rows() != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.rows(),
                labels.len()
            )));
        }
        if let Some(v) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("pixel value {v} outside [0, 1]")));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Data(format!("label {y} out of range for {num_classes} classes")));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            clean_predictions: BTreeMap::new(),
        })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(c, h, w)` of a single image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// New dataset holding the given rows, in order. Cached predictions are
    /// carried over for the selected rows.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let images = self.images.select_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let clean_predictions = self
            .clean_predictions
            .iter()
            .map(|(k, v)| (k.clone(), indices.iter().map(|&i| v[i]).collect()))
            .collect();
        Ok(Self {
            images,
            labels,
            num_classes: self.num_classes,
            clean_predictions,
        })
    }

    /// Predicts and caches clean labels for `net` under `model_id`.
    pub fn cache_predictions(&mut self, model_id: &str, net: &Network) -> Result<&[usize]> {
        if !self.clean_predictions.contains_key(model_id) {
            let pred = net.predict_labels(&self.images)?;
            self.clean_predictions.insert(model_id.to_string(), pred);
        }
        Ok(&self.clean_predictions[model_id])
    }

    pub fn predictions(&self, model_id: &str) -> Option<&[usize]> {
        self.clean_predictions.get(model_id).map(Vec::as_slice)
    }
}

//! Dataset ingestion, normalization, and augmentation.

mod augment;
mod cifar;
mod idx;
mod synthetic;

pub use augment::{augment, AugmentConfig};
pub use cifar::load_cifar10;
pub use idx::load_mnist;
pub use synthetic::make_synthetic;

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Batch of images in `[n, h, w, c]` row-major layout, values in `[0,1]`
/// for dataset images (attack outputs may exceed the range when clipping
/// is disabled).
#[derive(Clone, Debug, PartialEq)]
pub struct Images {
    pub shape: [usize; 4],
    pub data: Vec<f64>,
}

impl Images {
    pub fn new(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::Shape(format!(
                "images of shape {shape:?} need {expect} values, got {}",
                data.len()
            )));
        }
        Ok(Images { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        let len = shape.iter().product();
        Images {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn count(&self) -> usize {
        self.shape[0]
    }

    /// Elements per sample.
    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let d = self.sample_len();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f64] {
        let d = self.sample_len();
        &mut self.data[i * d..(i + 1) * d]
    }

    /// Per-sample tensor shape (without the batch axis).
    pub fn sample_shape(&self) -> [usize; 3] {
        [self.shape[1], self.shape[2], self.shape[3]]
    }

    /// New batch containing the selected samples, in the given order.
    pub fn select(&self, indices: &[usize]) -> Images {
        let d = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Images {
            shape: [indices.len(), self.shape[1], self.shape[2], self.shape[3]],
            data,
        }
    }

    /// Concatenate along the batch axis. Sample dims must agree.
    pub fn concat(parts: &[&Images]) -> Result<Images> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero image sets".into()))?;
        let mut n = 0;
        for p in parts {
            if p.sample_shape() != first.sample_shape() {
                return Err(Error::Shape(format!(
                    "concat of {:?} with {:?}",
                    first.shape, p.shape
                )));
            }
            n += p.count();
        }
        let mut data = Vec::with_capacity(n * first.sample_len());
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Images {
            shape: [n, first.shape[1], first.shape[2], first.shape[3]],
            data,
        })
    }
}

/// Where a dataset came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Mnist,
    Cifar10,
    Synthetic,
}

/// Images plus integer labels in `[0,10)`.
#[derive(Clone, Debug)]
pub struct LabeledDataset {
    pub images: Images,
    pub labels: Vec<u8>,
    pub provenance: Provenance,
}

impl LabeledDataset {
    pub fn new(images: Images, labels: Vec<u8>, provenance: Provenance) -> Result<Self> {
        if images.count() != labels.len() {
            return Err(Error::Ingestion(format!(
                "{} images vs {} labels",
                images.count(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
            return Err(Error::Ingestion(format!("label {bad} out of range [0,10)")));
        }
        if images.data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Ingestion("pixel values outside [0,1]".into()));
        }
        Ok(LabeledDataset {
            images,
            labels,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Subset by sample indices, preserving order.
    pub fn select(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            provenance: self.provenance,
        }
    }

    /// First `n` samples.
    pub fn take(&self, n: usize) -> LabeledDataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labeled_dataset_rejects_count_mismatch() {
        let imgs = Images::zeros([2, 4, 4, 1]);
        let err = LabeledDataset::new(imgs, vec![1], Provenance::Synthetic);
        assert!(matches!(err, Err(Error::Ingestion(_))));
    }

    #[test]
    fn labeled_dataset_rejects_label_out_of_range() {
        let imgs = Images::zeros([1, 4, 4, 1]);
        let err = LabeledDataset::new(imgs, vec![10], Provenance::Synthetic);
        assert!(matches!(err, Err(Error::Ingestion(_))));
    }

    #[test]
    fn select_preserves_order() {
        let mut imgs = Images::zeros([3, 1, 1, 1]);
        imgs.data = vec![0.1, 0.2, 0.3];
        let ds = LabeledDataset::new(imgs, vec![1, 2, 3], Provenance::Synthetic).unwrap();
        let sub = ds.select(&[2, 0]);
        assert_eq!(sub.labels, vec![3, 1]);
        assert_eq!(sub.images.data, vec![0.3, 0.1]);
    }
}

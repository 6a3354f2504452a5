//! Image containers, dataset loading and PNG conversion.

mod blobs;
pub mod idx;
pub mod png;

pub use blobs::make_synthetic_blobs;
pub use idx::load_mnist_idx;

use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `N` images of shape `(C, H, W)` with pixels in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    values: Vec<f32>,
    n: usize,
    shape: (usize, usize, usize),
}

impl ImageBatch {
    pub fn new(values: Vec<f32>, n: usize, shape: (usize, usize, usize)) -> Result<Self> {
        let per = shape.0 * shape.1 * shape.2;
        if per == 0 {
            return Err(Error::InvalidArgument("empty image shape".into()));
        }
        crate::error::check_dim(n * per, values.len())?;
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
        Ok(Self { values, n, shape })
    }

    /// Reads a `[N, C, H, W]` tensor, clamping to `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (n, c, h, w) = t.dims4()?;
        let values = t
            .clamp(0.0, 1.0)?
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        Self::new(values, n, (c, h, w))
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let (c, h, w) = self.shape;
        Ok(Tensor::from_slice(&self.values, (self.n, c, h, w), device)?.to_dtype(dtype)?)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn pixels_per_image(&self) -> usize {
        self.shape.0 * self.shape.1 * self.shape.2
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let p = self.pixels_per_image();
        &self.values[i * p..(i + 1) * p]
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let mut values = Vec::with_capacity(indices.len() * self.pixels_per_image());
        for &i in indices {
            values.extend_from_slice(self.image(i));
        }
        Self {
            values,
            n: indices.len(),
            shape: self.shape,
        }
    }

    pub fn range(&self, start: usize, end: usize) -> Self {
        let p = self.pixels_per_image();
        Self {
            values: self.values[start * p..end * p].to_vec(),
            n: end - start,
            shape: self.shape,
        }
    }
}

/// Images with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: ImageBatch,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: ImageBatch, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        crate::error::check_dim(images.len(), labels.len())?;
        if let Some(&index) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::ClassOutOfRange {
                index,
                classes: num_classes,
            });
        }
        Ok(Self {
            images,
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

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// First `n` items (or all of them).
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            images: self.images.range(0, n),
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
        }
    }

    /// Empirical `log p(y)`. Classes that never occur are an error because
    /// their log-prior would be `-inf`.
    pub fn class_log_prior(&self) -> Result<Vec<f64>> {
        let mut counts = vec![0usize; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        if let Some(i) = counts.iter().position(|&c| c == 0) {
            return Err(Error::InvalidArgument(format!("class {i} has no samples")));
        }
        let n = self.len() as f64;
        Ok(counts.iter().map(|&c| (c as f64 / n).ln()).collect())
    }

    /// Keeps only the listed classes and renumbers them `0..classes.len()`.
    pub fn filter_classes(&self, classes: &[usize]) -> Result<Self> {
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| classes.contains(&self.labels[i]))
            .collect();
        let mut out = self.select(&keep);
        for y in &mut out.labels {
            *y = classes.iter().position(|c| c == y).unwrap_or_default();
        }
        out.num_classes = classes.len();
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// MNIST digits 0 and 1 only.
    MnistBinary01,
    MnistFull,
    SyntheticBlobs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Where the data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    /// Directory with the four IDX files (optionally gzipped).
    pub root: PathBuf,
    /// Synthetic training images per class.
    pub blobs_per_class: usize,
    /// Synthetic test images per class.
    pub blobs_test_per_class: usize,
    /// Seed of the synthetic generator.
    pub blobs_seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::MnistBinary01,
            root: PathBuf::from("data/mnist"),
            blobs_per_class: 256,
            blobs_test_per_class: 64,
            blobs_seed: 7,
        }
    }
}

impl DatasetSpec {
    pub fn num_classes(&self) -> usize {
        match self.kind {
            DatasetKind::MnistFull => 10,
            DatasetKind::MnistBinary01 | DatasetKind::SyntheticBlobs => 2,
        }
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        match self.kind {
            DatasetKind::SyntheticBlobs => (1, 16, 16),
            _ => (1, 28, 28),
        }
    }

    fn idx_path(&self, stem: &str) -> PathBuf {
        let plain = self.root.join(stem);
        if plain.exists() {
            plain
        } else {
            self.root.join(format!("{stem}.gz"))
        }
    }

    pub fn load(&self, split: Split) -> Result<Dataset> {
        match self.kind {
            DatasetKind::SyntheticBlobs => {
                let (n, seed) = match split {
                    Split::Train => (self.blobs_per_class, self.blobs_seed),
                    Split::Test => (self.blobs_test_per_class, self.blobs_seed ^ 0x5eed_7e57),
                };
                let (images, labels) = make_synthetic_blobs(n, seed)?;
                Dataset::new(images, labels, 2)
            }
            DatasetKind::MnistBinary01 | DatasetKind::MnistFull => {
                let prefix = match split {
                    Split::Train => "train",
                    Split::Test => "t10k",
                };
                let (images, labels) = load_mnist_idx(
                    &self.idx_path(&format!("{prefix}-images-idx3-ubyte")),
                    &self.idx_path(&format!("{prefix}-labels-idx1-ubyte")),
                )?;
                let full = Dataset::new(images, labels, 10)?;
                if self.kind == DatasetKind::MnistBinary01 {
                    full.filter_classes(&[0, 1])
                } else {
                    Ok(full)
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_batch_validates() {
        assert!(ImageBatch::new(vec![0.5; 8], 2, (1, 2, 2)).is_ok());
        assert!(ImageBatch::new(vec![0.5; 7], 2, (1, 2, 2)).is_err());
        assert!(ImageBatch::new(vec![1.5; 4], 1, (1, 2, 2)).is_err());
    }

    #[test]
    fn tensor_round_trip() {
        let b = ImageBatch::new((0..8).map(|i| i as f32 / 8.0).collect(), 2, (1, 2, 2)).unwrap();
        let t = b.to_tensor(DType::F32, &Device::Cpu).unwrap();
        assert_eq!(ImageBatch::from_tensor(&t).unwrap(), b);
    }

    #[test]
    fn filter_and_prior() {
        let images = ImageBatch::new(vec![0.0; 5], 5, (1, 1, 1)).unwrap();
        let ds = Dataset::new(images, vec![3, 0, 1, 0, 7], 10).unwrap();
        let bin = ds.filter_classes(&[0, 1]).unwrap();
        assert_eq!(bin.labels, vec![0, 1, 0]);
        let lp = bin.class_log_prior().unwrap();
        assert!((lp[0] - (2.0f64 / 3.0).ln()).abs() < 1e-12);
        assert!(ds.class_log_prior().is_err());
    }
}

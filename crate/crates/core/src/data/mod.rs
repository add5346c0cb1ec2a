//! Image datasets: IDX files, procedural shapes, corruptions, augmentation.

mod augment;
mod corrupt;
mod idx;
mod synth;

pub use augment::{augment, augment_image, AugmentConfig};
pub use corrupt::{build_cid_dataset, build_fixed_severity_dataset, corrupt, corrupt_with_param, CorruptionKind, CorruptionSpec};
pub use idx::{load_idx, read_idx_images, read_idx_labels, save_idx, write_idx_images, write_idx_labels, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use synth::{synth_dataset, SYNTH_SIZE};

use serde::{Deserialize, Serialize};

use crate::tensor::{Rng, Tensor};
use crate::{Error, Result};

/// Images as `u8` pixels, `N × C × H × W` row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    /// Where the data came from and how it was transformed.
    pub meta: String,
    shape: [usize; 3],
    images: Vec<u8>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, shape: [usize; 3], images: Vec<u8>, labels: Vec<usize>) -> Result<Self> {
        let per: usize = shape.iter().product();
        if per == 0 || images.len() != per * labels.len() {
            return Err(Error::Data(format!(
                "{} image bytes do not match {} labels of shape {shape:?}",
                images.len(),
                labels.len()
            )));
        }
        Ok(Self {
            name: name.into(),
            meta: String::new(),
            shape,
            images,
            labels,
        })
    }

    pub fn with_meta(mut self, meta: impl Into<String>) -> Self {
        self.meta = meta.into();
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one sample.
    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn sample_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &[u8] {
        &self.images
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let s = self.sample_len();
        &self.images[i * s..(i + 1) * s]
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(idx.len() * self.sample_len());
        for &i in idx {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            name: self.name.clone(),
            meta: self.meta.clone(),
            shape: self.shape,
            images,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// First `n` samples (or all if fewer).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.shape != other.shape {
            return Err(Error::Data(format!("cannot concatenate shapes {:?} and {:?}", self.shape, other.shape)));
        }
        let mut out = self.clone();
        out.images.extend_from_slice(&other.images);
        out.labels.extend_from_slice(&other.labels);
        out.name = format!("{}+{}", self.name, other.name);
        Ok(out)
    }

    /// Seeded split into (train, validation) with `fraction` of samples held out.
    pub fn split(&self, fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let perm = Rng::new(seed, SPLIT_STREAM).permutation(self.len());
        let n_valid = ((self.len() as f64) * fraction).round() as usize;
        let (valid, train) = perm.split_at(n_valid);
        let mut train = train.to_vec();
        let mut valid = valid.to_vec();
        train.sort_unstable();
        valid.sort_unstable();
        (self.subset(&train), self.subset(&valid))
    }

    /// Pixels scaled to [0, 1] as an `n × C × H × W` tensor.
    pub fn tensor(&self, idx: &[usize]) -> Tensor {
        let s = self.sample_len();
        let mut data = Vec::with_capacity(idx.len() * s);
        for &i in idx {
            data.extend(self.image(i).iter().map(|&p| p as f32 / 255.0));
        }
        let [c, h, w] = self.shape;
        Tensor::new(vec![idx.len(), c, h, w], data).expect("shape matches")
    }

    pub fn all_tensor(&self) -> Tensor {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.tensor(&idx)
    }

    pub(crate) fn map_images(&self, mut f: impl FnMut(usize, &[u8]) -> Vec<u8>) -> Dataset {
        let mut images = Vec::with_capacity(self.images.len());
        for i in 0..self.len() {
            images.extend(f(i, self.image(i)));
        }
        Dataset { images, ..self.clone() }
    }
}

pub(crate) const SPLIT_STREAM: u64 = 0x5911;

//! Datasets: in-memory store, loaders and the synthetic retina generator.

mod idx;
mod png_dir;
mod synthetic;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TowerError};
use crate::image::Image;
use crate::rng::rng_from_seed;
use crate::scalar::Scalar;

pub use idx::{load_idx, read_idx, write_idx, write_idx_dataset, IdxArray};
pub use png_dir::{load_png_dir, read_png, write_mask_png, write_png};
pub use synthetic::{gen_synthetic_retina, gen_synthetic_retina_with, SyntheticConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = TowerError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(TowerError::Data(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Fundoscopic,
    Xray,
    Ct,
    Ultrasound,
    Synthetic,
}

impl std::str::FromStr for Modality {
    type Err = TowerError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fundoscopic" => Ok(Modality::Fundoscopic),
            "xray" | "x-ray" => Ok(Modality::Xray),
            "ct" => Ok(Modality::Ct),
            "ultrasound" => Ok(Modality::Ultrasound),
            "synthetic" => Ok(Modality::Synthetic),
            other => Err(TowerError::ConfigKey {
                key: "modality".into(),
                reason: format!("unknown modality `{other}`"),
            }),
        }
    }
}

/// Reassigns `frac` of the train entries to validation unless a validation
/// split already exists. At least one training entry is kept.
pub fn carve_validation(splits: &mut [Split], seed: u64, frac: f64) {
    if splits.contains(&Split::Val) {
        return;
    }
    let mut train: Vec<usize> = (0..splits.len())
        .filter(|&i| splits[i] == Split::Train)
        .collect();
    train.shuffle(&mut rng_from_seed(seed));
    let k = ((frac * train.len() as f64).round() as usize).min(train.len().saturating_sub(1));
    for &i in &train[..k] {
        splits[i] = Split::Val;
    }
}

/// Images plus optional class labels, binary masks and known disc centers.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<S = f32> {
    pub images: Vec<Image<S>>,
    pub ids: Vec<String>,
    pub labels: Option<Vec<usize>>,
    /// Per-pixel `{0, 1}` ground truth, one channel.
    pub masks: Option<Vec<Image<S>>>,
    /// `(row, col)` of the bright disc when known.
    pub centers: Option<Vec<(usize, usize)>>,
    pub splits: Vec<Split>,
    pub modality: Modality,
    pub num_classes: usize,
}

impl<S: Scalar> Dataset<S> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `(height, width, channels)` shared by every image.
    pub fn shape(&self) -> Option<(usize, usize, usize)> {
        self.images.first().map(|i| i.shape())
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.splits[i] == split)
            .collect()
    }

    /// Checks that per-sample arrays line up and every image is in range.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let lens = [
            ("ids", Some(self.ids.len())),
            ("labels", self.labels.as_ref().map(Vec::len)),
            ("masks", self.masks.as_ref().map(Vec::len)),
            ("centers", self.centers.as_ref().map(Vec::len)),
            ("splits", Some(self.splits.len())),
        ];
        for (what, len) in lens {
            if let Some(l) = len {
                if l != n {
                    return Err(TowerError::Data(format!(
                        "{what} has {l} entries for {n} images"
                    )));
                }
            }
        }
        if let Some(shape) = self.shape() {
            for (i, img) in self.images.iter().enumerate() {
                if img.shape() != shape {
                    return Err(TowerError::Data(format!(
                        "image {i} is {:?}, expected {shape:?}",
                        img.shape()
                    )));
                }
                img.check_normalized()?;
            }
        }
        if let Some(labels) = &self.labels {
            if let Some(&bad) = labels.iter().find(|&&l| l >= self.num_classes) {
                return Err(TowerError::Data(format!(
                    "label {bad} out of range for {} classes",
                    self.num_classes
                )));
            }
        }
        if let Some(masks) = &self.masks {
            let (h, w, _) = self.shape().unwrap_or((0, 0, 0));
            for (i, m) in masks.iter().enumerate() {
                if m.shape() != (h, w, 1) {
                    return Err(TowerError::Data(format!(
                        "mask {i} is {:?}, expected {:?}",
                        m.shape(),
                        (h, w, 1)
                    )));
                }
            }
        }
        Ok(())
    }

    /// New dataset holding the samples at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset<S> {
        Dataset {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
            masks: self
                .masks
                .as_ref()
                .map(|m| idx.iter().map(|&i| m[i].clone()).collect()),
            centers: self
                .centers
                .as_ref()
                .map(|c| idx.iter().map(|&i| c[i]).collect()),
            splits: idx.iter().map(|&i| self.splits[i]).collect(),
            modality: self.modality,
            num_classes: self.num_classes,
        }
    }

    pub fn split(&self, split: Split) -> Dataset<S> {
        self.subset(&self.indices(split))
    }

    /// Reassigns every sample to a split with the given fractions; the
    /// remainder goes to train.
    pub fn assign_random_splits(&mut self, seed: u64, val_frac: f64, test_frac: f64) -> Result<()> {
        if !(0.0..1.0).contains(&val_frac)
            || !(0.0..1.0).contains(&test_frac)
            || val_frac + test_frac >= 1.0
        {
            return Err(TowerError::Config(format!(
                "split fractions {val_frac} / {test_frac} leave no training data"
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng_from_seed(seed));
        let n_val = (val_frac * self.len() as f64).round() as usize;
        let n_test = (test_frac * self.len() as f64).round() as usize;
        self.splits = vec![Split::Train; self.len()];
        for (k, &i) in order.iter().enumerate() {
            if k < n_val {
                self.splits[i] = Split::Val;
            } else if k < n_val + n_test {
                self.splits[i] = Split::Test;
            }
        }
        Ok(())
    }

    /// Moves `frac` of the training samples to validation when the dataset
    /// ships no validation split.
    /// Moves `frac` of the training samples to validation when the dataset
    /// ships no validation split.
    pub fn ensure_validation(&mut self, seed: u64, frac: f64) {
        carve_validation(&mut self.splits, seed, frac);
    }

    pub fn cast<T: Scalar>(&self) -> Dataset<T> {
        Dataset {
            images: self.images.iter().map(Image::cast).collect(),
            ids: self.ids.clone(),
            labels: self.labels.clone(),
            masks: self
                .masks
                .as_ref()
                .map(|m| m.iter().map(Image::cast).collect()),
            centers: self.centers.clone(),
            splits: self.splits.clone(),
            modality: self.modality,
            num_classes: self.num_classes,
        }
    }

    /// Number of samples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        if let Some(labels) = &self.labels {
            for &l in labels {
                counts[l] += 1;
            }
        }
        counts
    }
}

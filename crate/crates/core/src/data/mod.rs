//! Dataset ingestion, augmentation, fold splitting and synthetic data.

mod augment;
mod dataset;
pub mod io;
mod kfold;
mod synth;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use augment::{augment, AugmentParams};
pub use dataset::{Dataset, LoadReport};
pub use kfold::kfold_split;
pub use synth::{synth_generate, SynthManifest};

use crate::error::{Error, Result};
use crate::labelgen::{DistanceMetric, LabelSet};
use crate::network::EncoderSpec;

/// How raw intensities are mapped to [0, 1].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Per-image min-max.
    #[default]
    MinMax,
    /// Divide 8-bit values by 255.
    Scale255,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub name: String,
    pub image_dir: PathBuf,
    pub mask_dir: PathBuf,
    /// (height, width); both multiples of 16.
    pub target_size: [usize; 2],
    /// Millimetres per pixel (dy, dx), when known.
    pub spacing: Option<[f64; 2]>,
    pub fold_count: usize,
    pub seed: u64,
    /// Boundary band width used when splitting labels.
    pub alpha: f64,
    pub distance_metric: DistanceMetric,
    pub normalization: Normalization,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            name: "dataset".into(),
            image_dir: PathBuf::from("images"),
            mask_dir: PathBuf::from("masks"),
            target_size: [256, 256],
            spacing: None,
            fold_count: 5,
            seed: 0,
            alpha: crate::labelgen::DEFAULT_ALPHA,
            distance_metric: DistanceMetric::Euclidean,
            normalization: Normalization::MinMax,
        }
    }
}

impl DatasetSpec {
    /// Spec for a directory with `images/` and `masks/` subdirectories.
    pub fn from_root(name: &str, root: impl Into<PathBuf>, target_size: [usize; 2]) -> Self {
        let root = root.into();
        Self {
            name: name.into(),
            image_dir: root.join("images"),
            mask_dir: root.join("masks"),
            target_size,
            ..Self::default()
        }
    }

    /// Known dataset layouts. UNS (580x420) is resized to the nearest
    /// 16-divisible size, 576x416.
    pub fn preset(name: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let size = match name {
            "busi" => [512, 512],
            "uns" => [416, 576],
            "uhes" => [256, 448],
            "synthetic" => [128, 128],
            other => return Err(Error::Config(format!("unknown dataset preset {other:?}"))),
        };
        Ok(Self::from_root(name, root, size))
    }

    pub fn validate(&self) -> Result<()> {
        let s = EncoderSpec::OUTPUT_STRIDE;
        let [h, w] = self.target_size;
        if h == 0 || w == 0 || h % s != 0 || w % s != 0 {
            return Err(Error::Config(format!(
                "target size {h}x{w} must be a positive multiple of {s}"
            )));
        }
        if self.fold_count < 2 {
            return Err(Error::Config(format!("fold_count must be >= 2, got {}", self.fold_count)));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config("alpha must be non-negative".into()));
        }
        Ok(())
    }

    pub fn spacing_tuple(&self) -> Option<(f64, f64)> {
        self.spacing.map(|[a, b]| (a, b))
    }
}

/// 3-channel planar (C, H, W) image with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image3 {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image3 {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; 3 * height * width],
        }
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: Image3,
    pub labels: LabelSet,
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        self.labels.validate()?;
        if self.labels.final_mask.dims() != (self.image.height, self.image.width) {
            return Err(Error::Shape(format!(
                "sample {}: image {}x{} vs mask {:?}",
                self.id,
                self.image.height,
                self.image.width,
                self.labels.final_mask.dims()
            )));
        }
        Ok(())
    }
}

/// Deterministic 64-bit mix used to derive per-sample RNG seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        // splitmix64 finaliser
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

//! Crowd scenes: synthetic generation, annotation geometry, ground-truth
//! density, augmentation and on-disk datasets.

mod augment;
mod density;
mod generate;
mod geometry;
mod io;

pub use augment::{augment, resize_bilinear, AugmentConfig};
pub use density::{adaptive_sigmas, downsample_density, gt_density};
pub use generate::{generate_benchmark, generate_scene, BenchmarkConfig, SceneGenConfig};
pub use geometry::{head_size_3nn, resolved_sizes, size_from_bbox, size_histogram, SizeHistogram};
pub use io::{load_dataset, read_png, save_dataset, write_heatmap_png, write_png, ANNOTATIONS_FILE};

use limm_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Count regime of a synthetic scene, mirroring a low/medium/high test split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Low,
    Med,
    High,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Low, Regime::Med, Regime::High];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Low => "low",
            Regime::Med => "med",
            Regime::High => "high",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrowdScene {
    /// `[3, H, W]` with values in `[0, 1]`.
    pub image: Tensor,
    /// `(x, y)` in pixel coordinates, `0 <= x < W`, `0 <= y < H`.
    pub points: Vec<[f64; 2]>,
    pub sizes: Option<Vec<f64>>,
    pub split: Option<Split>,
    pub regime: Option<Regime>,
    /// Contains at least one head larger than 50 px.
    pub large: bool,
}

impl CrowdScene {
    pub fn new(image: Tensor, points: Vec<[f64; 2]>, sizes: Option<Vec<f64>>) -> Result<Self> {
        let scene = Self { image, points, sizes, split: None, regime: None, large: false };
        scene.validate()?;
        Ok(scene)
    }

    /// `(H, W)`.
    pub fn dims(&self) -> (usize, usize) {
        let s = self.image.shape();
        (s[1], s[2])
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }

    pub fn validate(&self) -> Result<()> {
        let &[3, h, w] = self.image.shape() else {
            return Err(invalid!("scene image must be [3, H, W], got {:?}", self.image.shape()));
        };
        if let Some(v) = self.image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid!("image value {v} outside [0, 1]"));
        }
        for &[x, y] in &self.points {
            if !(x >= 0.0 && x < w as f64 && y >= 0.0 && y < h as f64) {
                return Err(invalid!("point ({x}, {y}) outside the {w}x{h} image"));
            }
        }
        if let Some(sizes) = &self.sizes {
            if sizes.len() != self.points.len() {
                return Err(invalid!("{} sizes for {} points", sizes.len(), self.points.len()));
            }
            if let Some(s) = sizes.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
                return Err(invalid!("head size {s} is not positive"));
            }
        }
        Ok(())
    }
}

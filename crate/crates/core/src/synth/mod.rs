//! Synthetic multi-structure phantoms, intensity normalization, per-strategy
//! label encodings and slice augmentation.
//!
//! All randomness comes from `rand_chacha::ChaCha8Rng` seeded with
//! `seed_from_u64`, so a seed reproduces the same case on every platform.

mod augment;
mod phantom;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Strategy;

pub use augment::{augment, AugmentConfig, AugmentParams};
pub use phantom::{generate_case, has_adjacent_pair, PhantomConfig};

/// Half of the 26-neighbourhood; scanning these from every voxel visits each
/// unordered neighbour pair exactly once.
pub(crate) const FORWARD_NEIGHBOURS_26: [(isize, isize, isize); 13] = [
    (0, 0, 1),
    (0, 1, -1),
    (0, 1, 0),
    (0, 1, 1),
    (1, -1, -1),
    (1, -1, 0),
    (1, -1, 1),
    (1, 0, -1),
    (1, 0, 0),
    (1, 0, 1),
    (1, 1, -1),
    (1, 1, 0),
    (1, 1, 1),
];

/// Volume extents in voxels, slowest axis first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Extents {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl Extents {
    pub const fn new(depth: usize, height: usize, width: usize) -> Self {
        Self { depth, height, width }
    }

    pub fn voxels(&self) -> usize {
        self.depth * self.height * self.width
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.depth, self.height, self.width]
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.height + y) * self.width + x
    }
}

/// Physical voxel size in millimetres along (z, y, x).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub z: f64,
    pub y: f64,
    pub x: f64,
}

impl Spacing {
    pub const fn new(z: f64, y: f64, x: f64) -> Self {
        Self { z, y, x }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.z, self.y, self.x]
    }

    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().all(|s| s.is_finite() && *s > 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("spacing must be positive and finite, got {self:?}")))
        }
    }
}

impl Default for Spacing {
    fn default() -> Self {
        Self::new(1.0, 1.0, 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditionTag {
    Healthy,
    Pathological,
}

impl ConditionTag {
    pub fn as_str(self) -> &'static str {
        match self {
            ConditionTag::Healthy => "healthy",
            ConditionTag::Pathological => "pathological",
        }
    }
}

/// One synthetic subject.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub case_id: String,
    /// Intensities, `[D,H,W]` row-major.
    pub image: Vec<f64>,
    /// Structure labels in `0..=classes`, same layout as `image`.
    pub labels: Vec<u8>,
    pub extents: Extents,
    pub spacing_mm: Spacing,
    pub classes: usize,
    pub condition_tag: ConditionTag,
}

impl Case {
    pub fn validate(&self) -> Result<()> {
        let n = self.extents.voxels();
        if n == 0 || self.image.len() != n || self.labels.len() != n {
            return Err(Error::Contract(format!(
                "case {}: extents {:?} do not match image ({}) / labels ({})",
                self.case_id,
                self.extents,
                self.image.len(),
                self.labels.len()
            )));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l as usize > self.classes) {
            return Err(Error::Contract(format!(
                "case {}: label {l} exceeds class count {}",
                self.case_id, self.classes
            )));
        }
        self.spacing_mm.validate()
    }

    pub fn image_slice(&self, z: usize) -> &[f64] {
        let p = self.extents.plane();
        &self.image[z * p..(z + 1) * p]
    }

    pub fn label_slice(&self, z: usize) -> &[u8] {
        let p = self.extents.plane();
        &self.labels[z * p..(z + 1) * p]
    }
}

/// Rescales to zero mean and unit (population) variance. A constant input
/// maps to all zeros.
pub fn normalize_intensity(image: &[f64]) -> Vec<f64> {
    if image.iter().all(|&v| v == image[0]) {
        return vec![0.0; image.len()];
    }
    let n = image.len() as f64;
    let rough = image.iter().sum::<f64>() / n;
    let mean = rough + image.iter().map(|v| v - rough).sum::<f64>() / n;
    let var = image.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    image.iter().map(|v| (v - mean) / sd).collect()
}

/// Binary mask channels for one strategy, each a full `[D,H,W]` volume.
///
/// * individual: `classes` channels, channel `c` is `labels == c + 1`
/// * global: one channel, `labels >= 1`
/// * multi: `classes + 1` channels, channel 0 is background
#[derive(Clone, Debug, PartialEq)]
pub struct LabelEncoding {
    pub strategy: Strategy,
    pub classes: usize,
    pub extents: Extents,
    pub masks: Vec<Vec<u8>>,
}

impl LabelEncoding {
    pub fn channels(&self) -> usize {
        self.masks.len()
    }

    /// Channels that describe structures (everything except multi's background).
    pub fn foreground(&self) -> &[Vec<u8>] {
        match self.strategy {
            Strategy::Multi => &self.masks[1..],
            _ => &self.masks,
        }
    }

    /// Foreground channels of slice `z` as `[channels,H,W]` reals.
    pub fn foreground_slice(&self, z: usize) -> Vec<f64> {
        let p = self.extents.plane();
        self.foreground()
            .iter()
            .flat_map(|m| m[z * p..(z + 1) * p].iter().map(|&v| f64::from(v)))
            .collect()
    }
}

pub fn encode_labels(case: &Case, strategy: Strategy) -> Result<LabelEncoding> {
    case.validate()?;
    let indicator = |pred: &dyn Fn(u8) -> bool| -> Vec<u8> { case.labels.iter().map(|&l| u8::from(pred(l))).collect() };
    let masks = match strategy {
        Strategy::Individual => (1..=case.classes as u8).map(|c| indicator(&|l| l == c)).collect(),
        Strategy::Global => vec![indicator(&|l| l >= 1)],
        Strategy::Multi => (0..=case.classes as u8).map(|c| indicator(&|l| l == c)).collect(),
    };
    Ok(LabelEncoding {
        strategy,
        classes: case.classes,
        extents: case.extents,
        masks,
    })
}

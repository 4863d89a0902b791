use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::synth::{augment, encode_labels, normalize_intensity, AugmentConfig, Case};
use crate::types::Strategy;

/// Which mask channels a model is trained to produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskTarget {
    /// One binary channel for structure `1..=C` (individual strategy).
    Structure(usize),
    /// Union of all structures.
    Global,
    /// One channel per structure.
    Multi,
}

impl MaskTarget {
    /// Targets needed to cover a strategy; individual needs one per structure.
    pub fn for_strategy(strategy: Strategy, classes: usize) -> Vec<MaskTarget> {
        match strategy {
            Strategy::Individual => (1..=classes).map(MaskTarget::Structure).collect(),
            Strategy::Global => vec![MaskTarget::Global],
            Strategy::Multi => vec![MaskTarget::Multi],
        }
    }

    pub fn strategy(self) -> Strategy {
        match self {
            MaskTarget::Structure(_) => Strategy::Individual,
            MaskTarget::Global => Strategy::Global,
            MaskTarget::Multi => Strategy::Multi,
        }
    }
}

/// 2D training slices with normalized images and foreground mask channels.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceDataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub target: MaskTarget,
    /// One `[H*W]` image per slice.
    pub images: Vec<Vec<f64>>,
    /// One `[channels*H*W]` mask stack per slice.
    pub masks: Vec<Vec<f64>>,
    /// Source case of every slice.
    pub case_ids: Vec<String>,
}

impl SliceDataset {
    /// Slices every case along its first axis. Intensities are normalized
    /// per case volume.
    pub fn from_cases(cases: &[Case], target: MaskTarget) -> Result<Self> {
        let first = cases
            .first()
            .ok_or_else(|| Error::Contract("dataset needs at least one case".into()))?;
        let (height, width) = (first.extents.height, first.extents.width);
        let classes = first.classes;
        let channels = match target {
            MaskTarget::Multi => classes,
            MaskTarget::Structure(c) if c == 0 || c > classes => {
                return Err(Error::Config(format!("structure {c} outside 1..={classes}")));
            }
            _ => 1,
        };
        let mut out = Self {
            height,
            width,
            channels,
            target,
            images: Vec::new(),
            masks: Vec::new(),
            case_ids: Vec::new(),
        };
        for case in cases {
            if (case.extents.height, case.extents.width) != (height, width) || case.classes != classes {
                return Err(Error::Contract(format!(
                    "case {} has slice extent {}x{} and {} classes, expected {height}x{width} and {classes}",
                    case.case_id, case.extents.height, case.extents.width, case.classes
                )));
            }
            let enc = encode_labels(case, target.strategy())?;
            let image = normalize_intensity(&case.image);
            let plane = height * width;
            for z in 0..case.extents.depth {
                out.images.push(image[z * plane..(z + 1) * plane].to_vec());
                let m = match target {
                    MaskTarget::Structure(c) => enc.masks[c - 1][z * plane..(z + 1) * plane]
                        .iter()
                        .map(|&v| f64::from(v))
                        .collect(),
                    _ => enc.foreground_slice(z),
                };
                out.masks.push(m);
                out.case_ids.push(case.case_id.clone());
            }
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Assembles `(x [B,1,H,W], y [B,C,H,W])` for the given slice indices,
    /// augmenting slice `i` with `seed_for(i)` when a config is supplied.
    pub fn batch(
        &self,
        indices: &[usize],
        augmentation: Option<(&AugmentConfig, &dyn Fn(usize) -> u64)>,
    ) -> Result<(Tensor, Tensor)> {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut xs = Vec::with_capacity(indices.len() * h * w);
        let mut ys = Vec::with_capacity(indices.len() * c * h * w);
        for &i in indices {
            match augmentation {
                Some((cfg, seed_for)) => {
                    let (img, m) = augment(&self.images[i], &self.masks[i], h, w, seed_for(i), cfg)?;
                    xs.extend(img);
                    ys.extend(m);
                }
                None => {
                    xs.extend_from_slice(&self.images[i]);
                    ys.extend_from_slice(&self.masks[i]);
                }
            }
        }
        let b = indices.len();
        Ok((Tensor::new(vec![b, 1, h, w], xs)?, Tensor::new(vec![b, c, h, w], ys)?))
    }
}

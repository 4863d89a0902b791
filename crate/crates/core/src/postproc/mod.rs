//! 3D post-processing of stacked 2D predictions: largest connected component
//! and morphological closing.


use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{Extents, Spacing};

/// A binary 3D mask, `[D,H,W]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryVolume {
    pub extents: Extents,
    bits: Vec<bool>,
    pub spacing_mm: Spacing,
}

impl BinaryVolume {
    pub fn empty(extents: Extents, spacing_mm: Spacing) -> Self {
        Self {
            extents,
            bits: vec![false; extents.voxels()],
            spacing_mm,
        }
    }

    pub fn from_bits(extents: Extents, bits: Vec<bool>, spacing_mm: Spacing) -> Result<Self> {
        if bits.len() != extents.voxels() {
            return Err(Error::Contract(format!(
                "{} bits for extents {:?}",
                bits.len(),
                extents.as_array()
            )));
        }
        Ok(Self {
            extents,
            bits,
            spacing_mm,
        })
    }

    /// Voxels equal to `label` in a label volume.
    pub fn from_labels(extents: Extents, labels: &[u8], label: u8, spacing_mm: Spacing) -> Result<Self> {
        Self::from_bits(extents, labels.iter().map(|&l| l == label).collect(), spacing_mm)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> bool {
        self.bits[self.extents.index(z, y, x)]
    }

    pub fn set(&mut self, z: usize, y: usize, x: usize, value: bool) {
        let i = self.extents.index(z, y, x);
        self.bits[i] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Linear indices of foreground voxels in scan order.
    pub fn foreground(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    pub fn coords(&self, i: usize) -> [usize; 3] {
        let plane = self.extents.plane();
        [i / plane, (i % plane) / self.extents.width, i % self.extents.width]
    }

    pub fn is_subset_of(&self, other: &BinaryVolume) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    /// Voxel-wise union; extents must match.
    pub fn union(&self, other: &BinaryVolume) -> Result<BinaryVolume> {
        if self.extents != other.extents {
            return Err(Error::Contract(format!(
                "union of {:?} and {:?} volumes",
                self.extents.as_array(),
                other.extents.as_array()
            )));
        }
        let bits = self.bits.iter().zip(&other.bits).map(|(&a, &b)| a || b).collect();
        Ok(BinaryVolume {
            extents: self.extents,
            bits,
            spacing_mm: self.spacing_mm,
        })
    }
}

/// A 2D binary mask, `[H,W]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask2d {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

/// Stacks slices in the given order into a volume of depth `slices.len()`.
pub fn stack_slices(slices: &[Mask2d], spacing_mm: Spacing) -> Result<BinaryVolume> {
    let first = slices
        .first()
        .ok_or_else(|| Error::Contract("stack_slices needs at least one slice".into()))?;
    let (h, w) = (first.height, first.width);
    let mut bits = Vec::with_capacity(slices.len() * h * w);
    for (d, s) in slices.iter().enumerate() {
        if (s.height, s.width) != (h, w) || s.bits.len() != h * w {
            return Err(Error::Contract(format!(
                "slice {d} is {}x{} with {} bits, expected {h}x{w}",
                s.height,
                s.width,
                s.bits.len()
            )));
        }
        bits.extend_from_slice(&s.bits);
    }
    BinaryVolume::from_bits(Extents::new(slices.len(), h, w), bits, spacing_mm)
}

/// Voxel adjacency used for connected components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Connectivity {
    /// Shared faces.
    Six,
    /// Shared faces or edges.
    Eighteen,
    /// Shared faces, edges or corners.
    #[default]
    TwentySix,
}

impl Connectivity {
    pub fn from_count(n: u32) -> Result<Self> {
        match n {
            6 => Ok(Connectivity::Six),
            18 => Ok(Connectivity::Eighteen),
            26 => Ok(Connectivity::TwentySix),
            _ => Err(Error::Config(format!("connectivity must be 6, 18 or 26, got {n}"))),
        }
    }

    pub fn count(self) -> u32 {
        match self {
            Connectivity::Six => 6,
            Connectivity::Eighteen => 18,
            Connectivity::TwentySix => 26,
        }
    }

    /// Neighbour offsets; the number of nonzero components bounds the kind
    /// of contact (1 face, 2 edge, 3 corner).
    pub fn offsets(self) -> Vec<[isize; 3]> {
        let max_nonzero = match self {
            Connectivity::Six => 1,
            Connectivity::Eighteen => 2,
            Connectivity::TwentySix => 3,
        };
        let mut out = Vec::new();
        for dz in -1..=1isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let nz = [dz, dy, dx].iter().filter(|&&d| d != 0).count();
                    if nz > 0 && nz <= max_nonzero {
                        out.push([dz, dy, dx]);
                    }
                }
            }
        }
        out
    }
}

fn shifted(extents: Extents, [z, y, x]: [usize; 3], [dz, dy, dx]: [isize; 3]) -> Option<usize> {
    let nz = z.checked_add_signed(dz).filter(|&v| v < extents.depth)?;
    let ny = y.checked_add_signed(dy).filter(|&v| v < extents.height)?;
    let nx = x.checked_add_signed(dx).filter(|&v| v < extents.width)?;
    Some(extents.index(nz, ny, nx))
}

/// Component label per voxel (0 = background, components numbered from 1 in
/// scan order of their first voxel) and the size of each component.
pub fn label_components(vol: &BinaryVolume, connectivity: Connectivity) -> (Vec<u32>, Vec<usize>) {
    let offsets = connectivity.offsets();
    let mut labels = vec![0u32; vol.bits.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for seed in 0..vol.bits.len() {
        if !vol.bits[seed] || labels[seed] != 0 {
            continue;
        }
        let id = sizes.len() as u32 + 1;
        labels[seed] = id;
        queue.push_back(seed);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let c = vol.coords(i);
            for &o in &offsets {
                if let Some(j) = shifted(vol.extents, c, o) {
                    if vol.bits[j] && labels[j] == 0 {
                        labels[j] = id;
                        queue.push_back(j);
                    }
                }
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// Keeps the largest connected component. Equal sizes go to the component
/// whose first voxel comes earliest in scan order.
pub fn largest_connected_component(vol: &BinaryVolume, connectivity: Connectivity) -> BinaryVolume {
    let (labels, sizes) = label_components(vol, connectivity);
    let mut best: Option<(u32, usize)> = None;
    for (k, &s) in sizes.iter().enumerate() {
        if best.is_none_or(|(_, bs)| s > bs) {
            best = Some((k as u32 + 1, s));
        }
    }
    let keep = best.map_or(0, |(id, _)| id);
    BinaryVolume {
        extents: vol.extents,
        bits: labels.iter().map(|&l| l != 0 && l == keep).collect(),
        spacing_mm: vol.spacing_mm,
    }
}

/// True when the unit voxel at offset `d` touches the continuous ball of
/// radius `r` around the origin voxel centre. Radius 1 gives the 3x3x3 cube.
pub fn in_ball(d: [isize; 3], r: usize) -> bool {
    // nearest point of the voxel cube, doubled to stay in integers
    let dist2: isize = d.iter().map(|&v| (2 * v.abs() - 1).max(0).pow(2)).sum();
    dist2 <= 4 * (r * r) as isize
}

/// Offsets of the discrete Euclidean ball used as structuring element.
pub fn ball_offsets(radius: usize) -> Vec<[isize; 3]> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                if in_ball([dz, dy, dx], radius) {
                    out.push([dz, dy, dx]);
                }
            }
        }
    }
    out
}

/// Dilation followed by erosion with a Euclidean ball. The volume is padded
/// by `radius` zeros on every side first, so the result is the closing of the
/// mask in unbounded space restricted to the volume.
pub fn morphological_closing(vol: &BinaryVolume, radius: usize) -> Result<BinaryVolume> {
    if radius == 0 {
        return Err(Error::Config("closing radius must be at least 1".into()));
    }
    let e = vol.extents;
    let padded = Extents::new(e.depth + 2 * radius, e.height + 2 * radius, e.width + 2 * radius);
    let ball = ball_offsets(radius);

    let mut dilated = vec![false; padded.voxels()];
    for i in vol.foreground() {
        let [z, y, x] = vol.coords(i);
        let c = [z + radius, y + radius, x + radius];
        for &o in &ball {
            // a ball around a padded-interior voxel stays inside the pad
            if let Some(j) = shifted(padded, c, o) {
                dilated[j] = true;
            }
        }
    }

    let mut bits = vec![false; e.voxels()];
    for z in 0..e.depth {
        for y in 0..e.height {
            for x in 0..e.width {
                let c = [z + radius, y + radius, x + radius];
                bits[e.index(z, y, x)] = ball
                    .iter()
                    .all(|&o| shifted(padded, c, o).is_some_and(|j| dilated[j]));
            }
        }
    }
    Ok(BinaryVolume {
        extents: e,
        bits,
        spacing_mm: vol.spacing_mm,
    })
}

/// Post-processing settings applied per structure after stacking.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PostprocConfig {
    pub connectivity: Connectivity,
    pub closing_radius: usize,
    pub enabled: bool,
}

impl Default for PostprocConfig {
    fn default() -> Self {
        Self {
            connectivity: Connectivity::TwentySix,
            closing_radius: 1,
            enabled: true,
        }
    }
}

/// Largest component, then closing.
pub fn postprocess(vol: &BinaryVolume, cfg: &PostprocConfig) -> Result<BinaryVolume> {
    if !cfg.enabled {
        return Ok(vol.clone());
    }
    morphological_closing(&largest_connected_component(vol, cfg.connectivity), cfg.closing_radius)
}

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Case, ConditionTag, Extents, Spacing};
use crate::error::{Error, Result};

/// Parameters of the synthetic phantom generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub classes: usize,
    pub extents: Extents,
    pub spacing_mm: Spacing,
    /// Standard deviation of the additive Gaussian noise.
    pub noise_sd: f64,
    /// Peak amplitude of the smooth additive bias field.
    pub bias_amplitude: f64,
    /// Intensity drop on voxels bordering another label (cortex-like rim).
    pub rim_drop: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            classes: 3,
            extents: Extents::new(16, 64, 64),
            spacing_mm: Spacing::new(0.5, 0.25, 0.25),
            noise_sd: 0.25,
            bias_amplitude: 0.2,
            rim_drop: 0.4,
        }
    }
}

/// One superellipsoid with a low-frequency boundary perturbation.
#[derive(Clone, Debug)]
struct Blob {
    center: [f64; 3],
    radii: [f64; 3],
    exponent: f64,
    angle: f64,
    harmonics: [(f64, f64); 3],
    tilt: f64,
}

impl Blob {
    fn sample(rng: &mut ChaCha8Rng, center: [f64; 3], base_radius: f64, depth_radius: f64, wobble: f64) -> Self {
        let mut harmonics = [(0.0, 0.0); 3];
        for (k, h) in harmonics.iter_mut().enumerate() {
            *h = (
                rng.gen_range(-wobble..wobble) / (k + 1) as f64,
                rng.gen_range(0.0..2.0 * PI),
            );
        }
        Self {
            center,
            radii: [
                depth_radius * rng.gen_range(0.85..1.15),
                base_radius * rng.gen_range(0.8..1.2),
                base_radius * rng.gen_range(0.8..1.2),
            ],
            exponent: rng.gen_range(2.0..3.5),
            angle: rng.gen_range(0.0..PI),
            harmonics,
            tilt: rng.gen_range(-0.15..0.15),
        }
    }

    /// Largest in-plane extent from the center, including the perturbation.
    fn reach(&self) -> f64 {
        let wobble: f64 = self.harmonics.iter().map(|h| h.0.abs()).sum();
        self.radii[1].max(self.radii[2]) * (1.0 + wobble)
    }

    fn contains(&self, z: f64, y: f64, x: f64) -> bool {
        let dz = (z - self.center[0]) / self.radii[0];
        let (dy0, dx0) = (y - self.center[1], x - self.center[2]);
        // in-plane rotation, with a slight drift of the outline across slices
        let a = self.angle + self.tilt * dz;
        let (s, c) = a.sin_cos();
        let u = (c * dx0 + s * dy0) / self.radii[2];
        let v = (-s * dx0 + c * dy0) / self.radii[1];
        let phi = v.atan2(u);
        let scale = 1.0
            + self
                .harmonics
                .iter()
                .enumerate()
                .map(|(k, (amp, phase))| amp * ((k + 2) as f64 * phi + phase + 0.5 * dz).cos())
                .sum::<f64>();
        let p = self.exponent;
        let level = u.abs().powf(p) + v.abs().powf(p) + dz.abs().powf(p);
        level < scale.max(0.2).powf(p)
    }
}

const MAX_ATTEMPTS: u64 = 64;

/// Generates one phantom case. Identical seeds and configs produce identical
/// cases on every platform (ChaCha8 stream, IEEE-754 arithmetic only).
pub fn generate_case(seed: u64, cfg: &PhantomConfig) -> Result<Case> {
    let Extents { depth, height, width } = cfg.extents;
    if !(1..=5).contains(&cfg.classes) {
        return Err(Error::Config(format!("class count must be in 1..=5, got {}", cfg.classes)));
    }
    if depth < 8 || height < 32 || width < 32 {
        return Err(Error::Generation(format!(
            "extents {depth}x{height}x{width} are below the 8x32x32 minimum"
        )));
    }
    cfg.spacing_mm.validate()?;
    if !(cfg.noise_sd.is_finite() && cfg.noise_sd >= 0.0) {
        return Err(Error::Config(format!("noise_sd must be finite and non-negative, got {}", cfg.noise_sd)));
    }
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::types::derive_seed(seed, "phantom", &[attempt]));
        if let Some(case) = try_generate(&mut rng, seed, cfg) {
            return Ok(case);
        }
    }
    Err(Error::Generation(format!(
        "could not place {} adjacent structures in {depth}x{height}x{width} after {MAX_ATTEMPTS} attempts",
        cfg.classes
    )))
}

fn try_generate(rng: &mut ChaCha8Rng, seed: u64, cfg: &PhantomConfig) -> Option<Case> {
    let Extents { depth, height, width } = cfg.extents;
    let classes = cfg.classes;
    let pathological = rng.gen_bool(0.4);
    let wobble = if pathological { 0.22 } else { 0.12 };
    let plane_min = height.min(width) as f64;
    let base_radius = plane_min * 0.28 / (classes as f64).sqrt();
    let depth_radius = depth as f64 * rng.gen_range(0.3..0.42);
    let zc = (depth as f64 - 1.0) / 2.0 + rng.gen_range(-0.5..0.5);

    let mut blobs: Vec<Blob> = Vec::with_capacity(classes);
    let first_center = [
        zc,
        (height as f64 - 1.0) / 2.0 + rng.gen_range(-0.1..0.1) * height as f64,
        (width as f64 - 1.0) / 2.0 + rng.gen_range(-0.1..0.1) * width as f64,
    ];
    blobs.push(Blob::sample(rng, first_center, base_radius, depth_radius, wobble));
    for _ in 1..classes {
        let anchor = blobs[rng.gen_range(0..blobs.len())].clone();
        let mut blob = Blob::sample(rng, [0.0; 3], base_radius, depth_radius, wobble);
        let dir = rng.gen_range(0.0..2.0 * PI);
        // overlap slightly so the priority rule leaves the pair touching
        let dist = 0.8 * (anchor.radii[1].min(anchor.radii[2]) + blob.radii[1].min(blob.radii[2]));
        blob.center = [
            zc + rng.gen_range(-0.5..0.5),
            anchor.center[1] + dist * dir.sin(),
            anchor.center[2] + dist * dir.cos(),
        ];
        blobs.push(blob);
    }
    for b in &blobs {
        let r = b.reach();
        let inside = |c: f64, extent: usize| c - r >= 1.0 && c + r <= extent as f64 - 2.0;
        if !inside(b.center[1], height) || !inside(b.center[2], width) {
            return None;
        }
    }

    let n = depth * height * width;
    let mut labels = vec![0u8; n];
    for z in 0..depth {
        for y in 0..height {
            for x in 0..width {
                let idx = (z * height + y) * width + x;
                if let Some(c) = blobs.iter().position(|b| b.contains(z as f64, y as f64, x as f64)) {
                    labels[idx] = (c + 1) as u8;
                }
            }
        }
    }
    let mut counts = vec![0usize; classes + 1];
    for &l in &labels {
        counts[l as usize] += 1;
    }
    if counts.contains(&0) || (classes > 1 && !has_adjacent_pair(&labels, cfg.extents)) {
        return None;
    }

    let means: Vec<f64> = (0..classes)
        .map(|c| {
            let spread = if classes > 1 { c as f64 / (classes - 1) as f64 } else { 0.5 };
            0.6 + 0.5 * spread + rng.gen_range(-0.05..0.05)
        })
        .collect();
    let bias_phase: [f64; 3] = [rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI)];
    let noise = Normal::new(0.0, cfg.noise_sd).expect("noise sd");
    let mut image = vec![0.0; n];
    for z in 0..depth {
        for y in 0..height {
            for x in 0..width {
                let idx = (z * height + y) * width + x;
                let l = labels[idx] as usize;
                let mut v = if l == 0 { 0.0 } else { means[l - 1] };
                if l != 0 && borders_other_label(&labels, cfg.extents, z, y, x) {
                    v -= cfg.rim_drop;
                }
                let fz = z as f64 / depth as f64;
                let fy = y as f64 / height as f64;
                let fx = x as f64 / width as f64;
                v += cfg.bias_amplitude
                    * ((PI * fy + bias_phase[0]).sin() * (PI * fx + bias_phase[1]).cos()
                        + 0.5 * (PI * fz + bias_phase[2]).sin())
                    / 1.5;
                v += noise.sample(rng);
                image[idx] = v;
            }
        }
    }

    Some(Case {
        case_id: format!("case_{seed:04}"),
        image,
        labels,
        extents: cfg.extents,
        spacing_mm: cfg.spacing_mm,
        classes,
        condition_tag: if pathological {
            ConditionTag::Pathological
        } else {
            ConditionTag::Healthy
        },
    })
}

/// In-plane 4-neighbour with a different label (including background).
fn borders_other_label(labels: &[u8], e: Extents, z: usize, y: usize, x: usize) -> bool {
    let here = labels[(z * e.height + y) * e.width + x];
    let at = |yy: usize, xx: usize| labels[(z * e.height + yy) * e.width + xx];
    (y > 0 && at(y - 1, x) != here && at(y - 1, x) != 0)
        || (y + 1 < e.height && at(y + 1, x) != here && at(y + 1, x) != 0)
        || (x > 0 && at(y, x - 1) != here && at(y, x - 1) != 0)
        || (x + 1 < e.width && at(y, x + 1) != here && at(y, x + 1) != 0)
}

/// True when two distinct foreground labels touch under 26-connectivity.
pub fn has_adjacent_pair(labels: &[u8], e: Extents) -> bool {
    for z in 0..e.depth {
        for y in 0..e.height {
            for x in 0..e.width {
                let a = labels[(z * e.height + y) * e.width + x];
                if a == 0 {
                    continue;
                }
                for (dz, dy, dx) in super::FORWARD_NEIGHBOURS_26 {
                    let (zz, yy, xx) = (z as isize + dz, y as isize + dy, x as isize + dx);
                    if zz < 0 || yy < 0 || xx < 0 {
                        continue;
                    }
                    let (zz, yy, xx) = (zz as usize, yy as usize, xx as usize);
                    if zz >= e.depth || yy >= e.height || xx >= e.width {
                        continue;
                    }
                    let b = labels[(zz * e.height + yy) * e.width + xx];
                    if b != 0 && b != a {
                        return true;
                    }
                }
            }
        }
    }
    false
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sampling ranges for the random slice transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub scale_min: f64,
    pub scale_max: f64,
    pub max_rotation_deg: f64,
    /// Largest shift as a fraction of the slice extent along each axis.
    pub max_shift_frac: f64,
    pub flips: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scale_min: 0.9,
            scale_max: 1.1,
            max_rotation_deg: 15.0,
            max_shift_frac: 0.1,
            flips: true,
        }
    }
}

/// One concrete transform. Applied as: scale and rotate about the slice
/// centre, translate by `(shift_y, shift_x)` pixels, then flip.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub scale: f64,
    pub rotation_deg: f64,
    pub shift_y: f64,
    pub shift_x: f64,
    pub flip_vertical: bool,
    pub flip_horizontal: bool,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        scale: 1.0,
        rotation_deg: 0.0,
        shift_y: 0.0,
        shift_x: 0.0,
        flip_vertical: false,
        flip_horizontal: false,
    };

    pub fn sample<R: Rng>(rng: &mut R, cfg: &AugmentConfig, height: usize, width: usize) -> Self {
        let span = |rng: &mut R, half: f64| if half > 0.0 { rng.gen_range(-half..=half) } else { 0.0 };
        let scale = if cfg.scale_max > cfg.scale_min {
            rng.gen_range(cfg.scale_min..=cfg.scale_max)
        } else {
            cfg.scale_min
        };
        let rotation_deg = span(rng, cfg.max_rotation_deg);
        let shift_y = span(rng, cfg.max_shift_frac * height as f64);
        let shift_x = span(rng, cfg.max_shift_frac * width as f64);
        let (flip_vertical, flip_horizontal) = if cfg.flips {
            (rng.gen_bool(0.5), rng.gen_bool(0.5))
        } else {
            (false, false)
        };
        Self {
            scale,
            rotation_deg,
            shift_y,
            shift_x,
            flip_vertical,
            flip_horizontal,
        }
    }

    /// Source coordinate `(y, x)` that lands on output pixel `(oy, ox)`.
    fn source(&self, oy: usize, ox: usize, height: usize, width: usize) -> (f64, f64) {
        let oy = if self.flip_vertical { height - 1 - oy } else { oy };
        let ox = if self.flip_horizontal { width - 1 - ox } else { ox };
        let cy = (height as f64 - 1.0) / 2.0;
        let cx = (width as f64 - 1.0) / 2.0;
        let py = oy as f64 - self.shift_y - cy;
        let px = ox as f64 - self.shift_x - cx;
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        // inverse rotation, then inverse scale
        let sy = (-s * px + c * py) / self.scale + cy;
        let sx = (c * px + s * py) / self.scale + cx;
        (sy, sx)
    }

    /// Bilinear resampling; samples outside the frame read as 0.
    pub fn apply_image(&self, image: &[f64], height: usize, width: usize) -> Vec<f64> {
        let at = |y: isize, x: isize| {
            if y < 0 || x < 0 || y >= height as isize || x >= width as isize {
                0.0
            } else {
                image[y as usize * width + x as usize]
            }
        };
        let mut out = vec![0.0; height * width];
        for oy in 0..height {
            for ox in 0..width {
                let (sy, sx) = self.source(oy, ox, height, width);
                let (y0, x0) = (sy.floor(), sx.floor());
                let (fy, fx) = (sy - y0, sx - x0);
                let (y0, x0) = (y0 as isize, x0 as isize);
                let mut v = (1.0 - fy) * (1.0 - fx) * at(y0, x0);
                if fx > 0.0 {
                    v += (1.0 - fy) * fx * at(y0, x0 + 1);
                }
                if fy > 0.0 {
                    v += fy * (1.0 - fx) * at(y0 + 1, x0);
                    if fx > 0.0 {
                        v += fy * fx * at(y0 + 1, x0 + 1);
                    }
                }
                out[oy * width + ox] = v;
            }
        }
        out
    }

    /// Nearest-neighbour resampling of one binary mask; outside reads as 0.
    pub fn apply_mask(&self, mask: &[f64], height: usize, width: usize) -> Vec<f64> {
        let mut out = vec![0.0; height * width];
        for oy in 0..height {
            for ox in 0..width {
                let (sy, sx) = self.source(oy, ox, height, width);
                let (y, x) = (sy.round(), sx.round());
                if y >= 0.0 && x >= 0.0 && (y as usize) < height && (x as usize) < width {
                    out[oy * width + ox] = mask[y as usize * width + x as usize];
                }
            }
        }
        out
    }
}

/// Applies one transform sampled from `seed` to an image slice and its
/// `[channels,H,W]` mask stack.
pub fn augment(
    image: &[f64],
    masks: &[f64],
    height: usize,
    width: usize,
    seed: u64,
    cfg: &AugmentConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let plane = height * width;
    if plane == 0 || image.len() != plane || !masks.len().is_multiple_of(plane) {
        return Err(Error::shape(
            "augment",
            format!("image {} and masks {} for a {height}x{width} slice", image.len(), masks.len()),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = AugmentParams::sample(&mut rng, cfg, height, width);
    let img = params.apply_image(image, height, width);
    let out_masks = masks
        .chunks(plane)
        .flat_map(|m| params.apply_mask(m, height, width))
        .collect();
    Ok((img, out_masks))
}

//! Random rotations, shifts, and horizontal flips.

use super::{Images, LabeledDataset};
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// Rotation drawn from U(-max, +max) degrees.
    pub max_rotation_degrees: f64,
    /// Integer-pixel shifts up to floor(fraction * dim) in each axis.
    pub max_shift_fraction: f64,
    pub horizontal_flip: bool,
    #[serde(default)]
    pub seed: u64,
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_rotation_degrees < 0.0 {
            return Err(Error::Config("negative max rotation".into()));
        }
        if !(0.0..1.0).contains(&self.max_shift_fraction) {
            return Err(Error::Config("shift fraction outside [0,1)".into()));
        }
        Ok(())
    }

    fn is_identity(&self) -> bool {
        self.max_rotation_degrees == 0.0 && self.max_shift_fraction == 0.0 && !self.horizontal_flip
    }
}

/// Per-sample random rotation (bilinear, zero fill), integer shift, and
/// optional flip with probability 0.5. Labels are unchanged; outputs are
/// clamped to `[0,1]`. The identity configuration returns the input
/// bit-exactly.
pub fn augment(data: &LabeledDataset, cfg: &AugmentConfig) -> Result<LabeledDataset> {
    cfg.validate()?;
    if cfg.is_identity() {
        return Ok(data.clone());
    }
    let [_, h, w, c] = data.images.shape;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let max_dy = (cfg.max_shift_fraction * h as f64).floor() as i64;
    let max_dx = (cfg.max_shift_fraction * w as f64).floor() as i64;
    let mut out = Images::zeros(data.images.shape);
    for i in 0..data.len() {
        let mut img = data.images.sample(i).to_vec();
        if cfg.max_rotation_degrees > 0.0 {
            let theta = rng
                .gen_range(-cfg.max_rotation_degrees..=cfg.max_rotation_degrees)
                .to_radians();
            img = rotate_bilinear(&img, h, w, c, theta);
        }
        if max_dy > 0 || max_dx > 0 {
            let dy = rng.gen_range(-max_dy..=max_dy);
            let dx = rng.gen_range(-max_dx..=max_dx);
            img = shift(&img, h, w, c, dy, dx);
        }
        if cfg.horizontal_flip && rng.gen::<bool>() {
            img = flip_horizontal(&img, h, w, c);
        }
        for v in img.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        out.sample_mut(i).copy_from_slice(&img);
    }
    LabeledDataset::new(out, data.labels.clone(), data.provenance)
}

/// Rotate one `[h,w,c]` image about its center by `theta` radians,
/// sampling with bilinear interpolation and zero fill outside.
pub fn rotate_bilinear(img: &[f64], h: usize, w: usize, c: usize, theta: f64) -> Vec<f64> {
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let (sin_t, cos_t) = theta.sin_cos();
    let mut out = vec![0.0; img.len()];
    for y in 0..h {
        for x in 0..w {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            // Inverse map: sample the source location that lands here.
            let sx = cx + dx * cos_t + dy * sin_t;
            let sy = cy - dx * sin_t + dy * cos_t;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            for ch in 0..c {
                let at = |yy: f64, xx: f64| -> f64 {
                    if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
                        0.0
                    } else {
                        img[(yy as usize * w + xx as usize) * c + ch]
                    }
                };
                let v = at(y0, x0) * (1.0 - fy) * (1.0 - fx)
                    + at(y0, x0 + 1.0) * (1.0 - fy) * fx
                    + at(y0 + 1.0, x0) * fy * (1.0 - fx)
                    + at(y0 + 1.0, x0 + 1.0) * fy * fx;
                out[(y * w + x) * c + ch] = v;
            }
        }
    }
    out
}

fn shift(img: &[f64], h: usize, w: usize, c: usize, dy: i64, dx: i64) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for y in 0..h as i64 {
        let sy = y - dy;
        if sy < 0 || sy >= h as i64 {
            continue;
        }
        for x in 0..w as i64 {
            let sx = x - dx;
            if sx < 0 || sx >= w as i64 {
                continue;
            }
            let src = (sy as usize * w + sx as usize) * c;
            let dst = (y as usize * w + x as usize) * c;
            out[dst..dst + c].copy_from_slice(&img[src..src + c]);
        }
    }
    out
}

fn flip_horizontal(img: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for y in 0..h {
        for x in 0..w {
            let src = (y * w + (w - 1 - x)) * c;
            let dst = (y * w + x) * c;
            out[dst..dst + c].copy_from_slice(&img[src..src + c]);
        }
    }
    out
}

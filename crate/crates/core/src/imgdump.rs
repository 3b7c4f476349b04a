//! PGM/PPM grid dumps of attacked images for perceptibility inspection.
//!
//! The grid puts the clean images on the top row and one row of
//! perturbed images per source batch underneath, matching the layout
//! used for eyeballing attack strength.

use crate::attacks::AdversarialBatch;
use crate::error::{Error, Result};
use std::io::Write;
use std::path::Path;

/// Render up to `max_cols` samples from the given batches into one
/// binary PGM (grayscale) or PPM (3-channel) grid file. All batches must
/// share the clean row of the first.
pub fn dump_images(batches: &[&AdversarialBatch], path: &Path, max_cols: usize) -> Result<()> {
    let first = batches
        .first()
        .ok_or_else(|| Error::Contract("dump of zero batches".into()))?;
    if first.is_empty() {
        return Err(Error::Contract("dump of an empty batch".into()));
    }
    let [_, h, w, c] = first.clean.shape;
    if c != 1 && c != 3 {
        return Err(Error::Config(format!("cannot render {c}-channel images")));
    }
    for b in batches {
        if b.clean.shape != first.clean.shape {
            return Err(Error::Shape("batches with differing image shapes".into()));
        }
    }
    let cols = first.len().min(max_cols).max(1);
    let rows = 1 + batches.len();
    let grid_w = cols * w;
    let grid_h = rows * h;
    let mut pixels = vec![0u8; grid_w * grid_h * c];

    let mut blit = |row: usize, col: usize, img: &[f64]| {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let v = img[(y * w + x) * c + ch].clamp(0.0, 1.0);
                    let dst = ((row * h + y) * grid_w + col * w + x) * c + ch;
                    pixels[dst] = (v * 255.0).round() as u8;
                }
            }
        }
    };
    for col in 0..cols {
        blit(0, col, first.clean.sample(col));
    }
    for (bi, b) in batches.iter().enumerate() {
        for col in 0..cols {
            blit(bi + 1, col, b.perturbed.sample(col));
        }
    }

    let mut file = std::fs::File::create(path)?;
    let magic = if c == 1 { "P5" } else { "P6" };
    write!(file, "{magic}\n{grid_w} {grid_h}\n255\n")?;
    file.write_all(&pixels)?;
    Ok(())
}

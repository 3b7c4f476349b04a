//! Procedurally rendered digit-like glyphs: the offline stand-in for
//! MNIST when no dataset files are available.
//!
//! Ten classes drawn as seven-segment digits on a 28x28 canvas with
//! per-sample rotation, position jitter, stroke thickness and intensity
//! variation, distractor speckles, and additive pixel noise. The jitter
//! is tuned so a trained classifier keeps a spread of decision margins
//! rather than saturating.

use super::augment::rotate_bilinear;
use super::{Images, LabeledDataset, Provenance};
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

const SIZE: usize = 28;

/// Segment layout: (A top, B top-right, C bottom-right, D bottom,
/// E bottom-left, F top-left, G middle), encoded per digit.
const SEGMENTS: [[bool; 7]; 10] = [
    [true, true, true, true, true, true, false],    // 0
    [false, true, true, false, false, false, false], // 1
    [true, true, false, true, true, false, true],   // 2
    [true, true, true, true, false, false, true],   // 3
    [false, true, true, false, false, true, true],  // 4
    [true, false, true, true, false, true, true],   // 5
    [true, false, true, true, true, true, true],    // 6
    [true, true, true, false, false, false, false], // 7
    [true, true, true, true, true, true, true],     // 8
    [true, true, true, true, false, true, true],    // 9
];

/// Deterministic class-balanced glyph dataset. Classes cycle 0..9, so any
/// `n` is balanced within one sample per class.
pub fn make_synthetic(n: usize, seed: u64) -> Result<LabeledDataset> {
    if n < 10 {
        return Err(Error::Config(format!(
            "synthetic dataset needs at least 10 samples, got {n}"
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut images = Images::zeros([n, SIZE, SIZE, 1]);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let digit = (i % 10) as u8;
        labels.push(digit);
        // Geometry varies per sample: box position and size, rotation,
        // stroke thickness and brightness.
        let left = rng.gen_range(6i64..=12);
        let width = rng.gen_range(9i64..=12);
        let top = rng.gen_range(3i64..=6);
        let height = rng.gen_range(16i64..=20);
        let box_ = GlyphBox {
            left,
            right: left + width,
            top,
            mid: top + height / 2,
            bottom: top + height,
        };
        let intensity = rng.gen_range(0.8..1.0);
        let thickness = 3usize;
        let theta = rng.gen_range(-10.0f64..=10.0).to_radians();

        let mut canvas = vec![0.0; SIZE * SIZE];
        let seg_jitter: [f64; 7] = std::array::from_fn(|_| rng.gen_range(0.85..1.0));
        draw_digit(&mut canvas, digit, &box_, intensity, thickness, &seg_jitter);
        let mut rotated = rotate_bilinear(&canvas, SIZE, SIZE, 1, theta);

        // Distractor speckles plus dense low noise blur class margins.
        for _ in 0..rng.gen_range(1..5) {
            let y = rng.gen_range(0..SIZE);
            let x = rng.gen_range(0..SIZE);
            rotated[y * SIZE + x] += rng.gen_range(0.2..0.45);
        }
        for v in rotated.iter_mut() {
            *v = (*v + rng.gen_range(0.0..0.15)).clamp(0.0, 1.0);
        }
        images.sample_mut(i).copy_from_slice(&rotated);
    }
    LabeledDataset::new(images, labels, Provenance::Synthetic)
}

struct GlyphBox {
    left: i64,
    right: i64,
    top: i64,
    mid: i64,
    bottom: i64,
}

fn draw_digit(
    canvas: &mut [f64],
    digit: u8,
    box_: &GlyphBox,
    intensity: f64,
    thickness: usize,
    seg_jitter: &[f64; 7],
) {
    let GlyphBox {
        left,
        right,
        top,
        mid,
        bottom,
    } = *box_;
    let segs = SEGMENTS[digit as usize];
    let mut stroke = |y0: i64, x0: i64, y1: i64, x1: i64, level: f64| {
        // Axis-aligned stroke thickened perpendicular to its axis.
        let horizontal = y0 == y1;
        for t in 0..thickness as i64 {
            for y in y0.min(y1)..=y0.max(y1) {
                for x in x0.min(x1)..=x0.max(x1) {
                    let (yy, xx) = if horizontal { (y + t, x) } else { (y, x + t) };
                    if (0..SIZE as i64).contains(&yy) && (0..SIZE as i64).contains(&xx) {
                        canvas[(yy as usize) * SIZE + xx as usize] = level;
                    }
                }
            }
        }
    };
    let coords = [
        (top, left, top, right),       // A
        (top, right, mid, right),      // B
        (mid, right, bottom, right),   // C
        (bottom, left, bottom, right), // D
        (mid, left, bottom, left),     // E
        (top, left, mid, left),        // F
        (mid, left, mid, right),       // G
    ];
    for (si, &(y0, x0, y1, x1)) in coords.iter().enumerate() {
        if segs[si] {
            stroke(y0, x0, y1, x1, intensity * seg_jitter[si]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_within_one() {
        let ds = make_synthetic(100, 1).unwrap();
        let mut counts = [0usize; 10];
        for &l in &ds.labels {
            counts[l as usize] += 1;
        }
        assert_eq!(counts, [10; 10]);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = make_synthetic(50, 7).unwrap();
        let b = make_synthetic(50, 7).unwrap();
        assert_eq!(a.images.data, b.images.data);
        assert_eq!(a.labels, b.labels);
        let c = make_synthetic(50, 8).unwrap();
        assert_ne!(a.images.data, c.images.data);
    }

    #[test]
    fn too_small_rejected() {
        assert!(make_synthetic(9, 0).is_err());
    }

    #[test]
    fn values_in_unit_interval() {
        let ds = make_synthetic(40, 3).unwrap();
        assert!(ds.images.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

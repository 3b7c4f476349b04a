//! Dense compute kernels shared by the graph operations.
//!
//! Row-major storage throughout. The matmul variants parallelize over
//! disjoint output row blocks, so results are bit-identical regardless of
//! thread count.

use rayon::prelude::*;

/// Rows handled per parallel task. Coarse enough to amortize scheduling.
const ROW_CHUNK: usize = 32;

/// c[m,n] = a[m,k] * b[k,n]
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    if m * k * n == 0 {
        return c;
    }
    c.par_chunks_mut(ROW_CHUNK * n)
        .zip(a.par_chunks(ROW_CHUNK * k))
        .for_each(|(c_blk, a_blk)| {
            let rows = a_blk.len() / k;
            for i in 0..rows {
                let a_row = &a_blk[i * k..(i + 1) * k];
                let c_row = &mut c_blk[i * n..(i + 1) * n];
                for (p, &av) in a_row.iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    let b_row = &b[p * n..(p + 1) * n];
                    for j in 0..n {
                        c_row[j] += av * b_row[j];
                    }
                }
            }
        });
    c
}

/// c[m,n] = a^T * b where a is [k,m] and b is [k,n].
pub fn matmul_at(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    if m * k * n == 0 {
        return c;
    }
    // Each task owns a block of C rows (a block of A columns) and scans
    // the full K extent sequentially.
    let blocks: Vec<(usize, &mut [f64])> = c.chunks_mut(ROW_CHUNK * n).enumerate().collect();
    blocks.into_par_iter().for_each(|(bi, c_blk)| {
        let i0 = bi * ROW_CHUNK;
        let rows = c_blk.len() / n;
        for p in 0..k {
            let a_row = &a[p * m..(p + 1) * m];
            let b_row = &b[p * n..(p + 1) * n];
            for i in 0..rows {
                let av = a_row[i0 + i];
                if av == 0.0 {
                    continue;
                }
                let c_row = &mut c_blk[i * n..(i + 1) * n];
                for j in 0..n {
                    c_row[j] += av * b_row[j];
                }
            }
        }
    });
    c
}

/// c[m,n] = a * b^T where a is [m,k] and b is [n,k].
pub fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut c = vec![0.0; m * n];
    if m * k * n == 0 {
        return c;
    }
    c.par_chunks_mut(ROW_CHUNK * n)
        .zip(a.par_chunks(ROW_CHUNK * k))
        .for_each(|(c_blk, a_blk)| {
            let rows = a_blk.len() / k;
            for i in 0..rows {
                let a_row = &a_blk[i * k..(i + 1) * k];
                let c_row = &mut c_blk[i * n..(i + 1) * n];
                for j in 0..n {
                    let b_row = &b[j * k..(j + 1) * k];
                    let mut s = 0.0;
                    for p in 0..k {
                        s += a_row[p] * b_row[p];
                    }
                    c_row[j] = s;
                }
            }
        });
    c
}

/// Expand one image [h,w,ci] into patch rows for a same-padded khxkw
/// convolution with stride 1: out[h*w, kh*kw*ci].
pub fn im2col_same(img: &[f64], h: usize, w: usize, ci: usize, kh: usize, kw: usize) -> Vec<f64> {
    let ph = (kh - 1) / 2;
    let pw = (kw - 1) / 2;
    let patch = kh * kw * ci;
    let mut cols = vec![0.0; h * w * patch];
    for oy in 0..h {
        for ox in 0..w {
            let row = &mut cols[(oy * w + ox) * patch..(oy * w + ox + 1) * patch];
            for ky in 0..kh {
                let iy = oy as isize + ky as isize - ph as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = ox as isize + kx as isize - pw as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = ((iy as usize * w) + ix as usize) * ci;
                    let dst = (ky * kw + kx) * ci;
                    row[dst..dst + ci].copy_from_slice(&img[src..src + ci]);
                }
            }
        }
    }
    cols
}

/// Scatter-add of patch-row gradients back into an image gradient,
/// inverse of [`im2col_same`].
pub fn col2im_same(
    cols: &[f64],
    h: usize,
    w: usize,
    ci: usize,
    kh: usize,
    kw: usize,
) -> Vec<f64> {
    let ph = (kh - 1) / 2;
    let pw = (kw - 1) / 2;
    let patch = kh * kw * ci;
    let mut img = vec![0.0; h * w * ci];
    for oy in 0..h {
        for ox in 0..w {
            let row = &cols[(oy * w + ox) * patch..(oy * w + ox + 1) * patch];
            for ky in 0..kh {
                let iy = oy as isize + ky as isize - ph as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = ox as isize + kx as isize - pw as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = ((iy as usize * w) + ix as usize) * ci;
                    let src = (ky * kw + kx) * ci;
                    for c in 0..ci {
                        img[dst + c] += row[src + c];
                    }
                }
            }
        }
    }
    img
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let a = vec![1.0, 2.0, 3.0, 4.0];
        let eye = vec![1.0, 0.0, 0.0, 1.0];
        assert_eq!(matmul(&a, &eye, 2, 2, 2), a);
    }

    #[test]
    fn matmul_variants_agree() {
        let m = 7;
        let k = 5;
        let n = 6;
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let c = matmul(&a, &b, m, k, n);

        // a^T path: build a_t as [k,m] then transpose product.
        let mut a_t = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                a_t[p * m + i] = a[i * k + p];
            }
        }
        let c_at = matmul_at(&a_t, &b, k, m, n);
        for (x, y) in c.iter().zip(c_at.iter()) {
            assert!((x - y).abs() < 1e-12);
        }

        let mut b_t = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                b_t[j * k + p] = b[p * n + j];
            }
        }
        let c_bt = matmul_bt(&a, &b_t, m, k, n);
        for (x, y) in c.iter().zip(c_bt.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn im2col_roundtrip_counts() {
        // col2im(ones) counts how many patches each pixel belongs to.
        let h = 4;
        let w = 4;
        let cols = vec![1.0; h * w * 9];
        let img = col2im_same(&cols, h, w, 1, 3, 3);
        // Interior pixels belong to 9 patches, corners to 4.
        assert_eq!(img[(1 * w + 1) as usize], 9.0);
        assert_eq!(img[0], 4.0);
    }
}

use std::f64::consts::PI;

use image::RgbImage;

use super::{check_dims, to_luma, Exec, LumaBuffer, VisionError};

/// Side of the downsampled grid fed to the DCT.
pub const PHASH_GRID: usize = 32;
const HASH_SIDE: usize = 8;

pub fn hamming(a: u64, b: u64) -> u32 {
    (a ^ b).count_ones()
}

pub fn phash(img: &RgbImage) -> Result<u64, VisionError> {
    phash_with(img, Exec::default())
}

/// 64-bit DCT perceptual hash.
///
/// Luma is area-averaged onto a 32x32 grid, transformed with a 2-D DCT-II,
/// and the 8x8 block of lowest non-DC frequencies (rows and columns 1..=8)
/// is thresholded at its median. Bit `8*r + c` is set when coefficient
/// `(r+1, c+1)` is strictly greater than the median.
pub fn phash_with(img: &RgbImage, exec: Exec) -> Result<u64, VisionError> {
    check_dims(img)?;
    let lum = to_luma(img, exec);
    let grid = area_resize(&lum, PHASH_GRID, PHASH_GRID);
    let dct = dct2_square(&grid, PHASH_GRID);

    let mut coeffs = [0f64; HASH_SIDE * HASH_SIDE];
    for r in 0..HASH_SIDE {
        for c in 0..HASH_SIDE {
            coeffs[r * HASH_SIDE + c] = dct[(r + 1) * PHASH_GRID + (c + 1)];
        }
    }
    let mut sorted = coeffs;
    sorted.sort_by(f64::total_cmp);
    let median = 0.5 * (sorted[31] + sorted[32]);

    let mut hash = 0u64;
    for (i, v) in coeffs.iter().enumerate() {
        if *v > median {
            hash |= 1 << i;
        }
    }
    Ok(hash)
}

/// Box-filter resize where every output cell averages the exact (fractional)
/// source area it covers.
fn area_resize(src: &LumaBuffer, out_w: usize, out_h: usize) -> Vec<f64> {
    let wx = axis_weights(src.width, out_w);
    let wy = axis_weights(src.height, out_h);

    // Collapse columns first: rows x out_w.
    let mut tmp = vec![0f64; src.height * out_w];
    for y in 0..src.height {
        let row = &src.data[y * src.width..(y + 1) * src.width];
        for (j, taps) in wx.iter().enumerate() {
            tmp[y * out_w + j] = taps.iter().map(|&(x, w)| w * f64::from(row[x])).sum();
        }
    }
    let mut out = vec![0f64; out_h * out_w];
    for (i, taps) in wy.iter().enumerate() {
        for j in 0..out_w {
            out[i * out_w + j] = taps.iter().map(|&(y, w)| w * tmp[y * out_w + j]).sum();
        }
    }
    out
}

/// For each output cell, the source indices it overlaps and their
/// normalized coverage weights.
fn axis_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|j| {
            let lo = j as f64 * scale;
            let hi = (j + 1) as f64 * scale;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(n_in);
            (first..last)
                .filter_map(|x| {
                    let overlap = (hi.min((x + 1) as f64) - lo.max(x as f64)).max(0.0);
                    (overlap > 0.0).then_some((x, overlap / scale))
                })
                .collect()
        })
        .collect()
}

/// Unnormalized separable DCT-II of an `n x n` row-major grid.
fn dct2_square(grid: &[f64], n: usize) -> Vec<f64> {
    let basis: Vec<f64> = (0..n * n)
        .map(|i| {
            let (k, x) = (i / n, i % n);
            (PI / n as f64 * (x as f64 + 0.5) * k as f64).cos()
        })
        .collect();
    let mut rows = vec![0f64; n * n];
    for r in 0..n {
        for k in 0..n {
            rows[r * n + k] = (0..n).map(|x| grid[r * n + x] * basis[k * n + x]).sum();
        }
    }
    let mut out = vec![0f64; n * n];
    for c in 0..n {
        for k in 0..n {
            out[k * n + c] = (0..n).map(|y| rows[y * n + c] * basis[k * n + y]).sum();
        }
    }
    out
}

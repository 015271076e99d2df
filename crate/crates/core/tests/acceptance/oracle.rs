//! Reference implementations written straight from the definitions, with
//! no code shared with the crate under test.

use image::RgbImage;

fn luma(img: &RgbImage) -> Vec<Vec<f64>> {
    (0..img.height())
        .map(|y| {
            (0..img.width())
                .map(|x| {
                    let p = img.get_pixel(x, y).0;
                    0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2])
                })
                .collect()
        })
        .collect()
}

/// DCT pHash for images whose sides are multiples of 32: block means on a
/// 32x32 grid, DCT-II, coefficients (v, u) for v, u in 1..=8 against their
/// median. Bit 8(v-1) + (u-1).
pub fn phash(img: &RgbImage) -> u64 {
    phash_with_margin(img).0
}

/// The hash and the smallest gap between a coefficient and the median,
/// relative to the largest coefficient. Near zero means a bit is decided by
/// rounding noise and two correct implementations may disagree.
pub fn phash_with_margin(img: &RgbImage) -> (u64, f64) {
    let (w, h) = (img.width() as usize, img.height() as usize);
    assert!(w % 32 == 0 && h % 32 == 0, "oracle pHash needs sides divisible by 32");
    let (bx, by) = (w / 32, h / 32);
    let l = luma(img);
    let mut g = [[0f64; 32]; 32];
    for (gy, row) in g.iter_mut().enumerate() {
        for (gx, cell) in row.iter_mut().enumerate() {
            let mut s = 0.0;
            for y in gy * by..(gy + 1) * by {
                for x in gx * bx..(gx + 1) * bx {
                    s += l[y][x];
                }
            }
            *cell = s / (bx * by) as f64;
        }
    }
    let basis = |k: usize, n: usize| (std::f64::consts::PI * (2 * n + 1) as f64 * k as f64 / 64.0).cos();
    let mut c = Vec::with_capacity(64);
    for v in 1..=8 {
        for u in 1..=8 {
            let mut s = 0.0;
            for (y, row) in g.iter().enumerate() {
                for (x, val) in row.iter().enumerate() {
                    s += val * basis(v, y) * basis(u, x);
                }
            }
            c.push(s);
        }
    }
    let mut sorted = c.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = (sorted[31] + sorted[32]) / 2.0;
    let scale = c.iter().fold(1e-12f64, |m, v| m.max(v.abs()));
    let margin = c.iter().map(|v| (v - median).abs()).fold(f64::INFINITY, f64::min) / scale;
    let hash = c
        .iter()
        .enumerate()
        .fold(0u64, |acc, (i, v)| if *v > median { acc | (1 << i) } else { acc });
    (hash, margin)
}

pub fn hamming(a: u64, b: u64) -> u32 {
    (a ^ b).count_ones()
}

/// Mean SSIM over every full 11x11 window, Gaussian weights with sigma 1.5,
/// constants (0.01 * 255)^2 and (0.03 * 255)^2. Images up to 512 px a side.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> f64 {
    assert_eq!(a.dimensions(), b.dimensions());
    assert!(a.width() <= 512 && a.height() <= 512);
    let (la, lb) = (luma(a), luma(b));
    let (w, h) = (a.width() as usize, a.height() as usize);
    let win = 11usize.min(w).min(h);
    let win = if win % 2 == 0 { win - 1 } else { win };
    let half = (win / 2) as f64;
    let g1: Vec<f64> = (0..win).map(|i| (-((i as f64 - half).powi(2)) / 4.5).exp()).collect();
    let norm: f64 = g1.iter().sum::<f64>().powi(2);
    let (c1, c2) = ((0.01f64 * 255.0).powi(2), (0.03f64 * 255.0).powi(2));
    let mut total = 0.0;
    let mut n = 0usize;
    for y0 in 0..=h - win {
        for x0 in 0..=w - win {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for j in 0..win {
                for i in 0..win {
                    let wgt = g1[i] * g1[j] / norm;
                    let (p, q) = (la[y0 + j][x0 + i], lb[y0 + j][x0 + i]);
                    ma += wgt * p;
                    mb += wgt * q;
                    saa += wgt * p * p;
                    sbb += wgt * q * q;
                    sab += wgt * p * q;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            n += 1;
        }
    }
    total / n as f64
}

/// 1 - edit distance / longer length, by characters.
pub fn levenshtein_similarity(a: &str, b: &str) -> f64 {
    let (a, b): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.iter().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, cb) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(ca != cb)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    1.0 - prev[b.len()] as f64 / a.len().max(b.len()) as f64
}

/// The loop equation by brute force: the largest k <= T - 2N such that
/// every pair (k + j, T - N + j), j < N, matches.
pub fn loop_start(t: usize, n: usize, matches: impl Fn(usize, usize) -> bool) -> Option<usize> {
    if t < 2 * n {
        return None;
    }
    let mut best = None;
    for k in 0..=t - 2 * n {
        if (0..n).all(|j| matches(k + j, t - n + j)) {
            best = Some(k);
        }
    }
    best
}

/// Pass@k by counting: `matrix[task][run]`.
pub fn pass_at_k(matrix: &[Vec<bool>], k: usize) -> Option<(usize, usize)> {
    if matrix.iter().any(|r| r.len() < k) || k == 0 || matrix.is_empty() {
        return None;
    }
    let solved = matrix.iter().filter(|r| r.iter().take(k).any(|&s| s)).count();
    Some((solved, matrix.len()))
}

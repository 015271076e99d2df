use image::RgbImage;

use super::{check_dims, par_rows, to_luma, Exec, LumaBuffer, VisionError};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
pub const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);
/// Screenshots whose longer side exceeds this are block-averaged by an
/// integer factor before SSIM.
pub const SSIM_MAX_SIDE: usize = 512;

/// Shift applied before second moments to limit f32 cancellation.
const CENTER: f32 = 128.0;

/// Per-image SSIM statistics: the (possibly downsampled) luma plus its
/// Gaussian-filtered mean and centered second moment over the valid region.
#[derive(Debug, Clone)]
pub struct SsimBuffer {
    src_width: u32,
    src_height: u32,
    gray: LumaBuffer,
    window: usize,
    mu: Vec<f32>,
    sq: Vec<f32>,
}

impl SsimBuffer {
    pub fn prepare(img: &RgbImage, exec: Exec) -> Result<Self, VisionError> {
        check_dims(img)?;
        let full = to_luma(img, exec);
        let gray = downsample(full, SSIM_MAX_SIDE);
        let window = window_for(gray.width, gray.height);
        let kernel = gaussian(window, SSIM_SIGMA);
        let mu = blur_valid(&gray.data, gray.width, gray.height, &kernel, exec);
        let centered: Vec<f32> = gray.data.iter().map(|v| (v - CENTER) * (v - CENTER)).collect();
        let sq = blur_valid(&centered, gray.width, gray.height, &kernel, exec);
        Ok(SsimBuffer {
            src_width: img.width(),
            src_height: img.height(),
            gray,
            window,
            mu,
            sq,
        })
    }

    pub fn gray(&self) -> &LumaBuffer {
        &self.gray
    }

    pub fn window(&self) -> usize {
        self.window
    }
}

fn window_for(w: usize, h: usize) -> usize {
    let m = SSIM_WINDOW.min(w).min(h);
    if m % 2 == 0 {
        m - 1
    } else {
        m
    }
}

fn gaussian(size: usize, sigma: f64) -> Vec<f32> {
    let half = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - half).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| (v / total) as f32).collect()
}

fn downsample(src: LumaBuffer, max_side: usize) -> LumaBuffer {
    let longest = src.width.max(src.height);
    if longest <= max_side {
        return src;
    }
    let f = longest.div_ceil(max_side);
    let (w, h) = (src.width.div_ceil(f), src.height.div_ceil(f));
    let mut data = vec![0f32; w * h];
    for oy in 0..h {
        for ox in 0..w {
            let (x0, y0) = (ox * f, oy * f);
            let (x1, y1) = ((x0 + f).min(src.width), (y0 + f).min(src.height));
            let mut acc = 0f64;
            for y in y0..y1 {
                for x in x0..x1 {
                    acc += f64::from(src.data[y * src.width + x]);
                }
            }
            data[oy * w + ox] = (acc / ((x1 - x0) * (y1 - y0)) as f64) as f32;
        }
    }
    LumaBuffer { width: w, height: h, data }
}

/// Separable Gaussian filter with no padding; output is
/// `(w - k + 1) x (h - k + 1)`.
fn blur_valid(data: &[f32], w: usize, h: usize, kernel: &[f32], exec: Exec) -> Vec<f32> {
    let k = kernel.len();
    let (ow, oh) = (w + 1 - k, h + 1 - k);
    let mut horiz = vec![0f32; ow * h];
    par_rows(&mut horiz, ow, exec, |(y, out)| {
        let row = &data[y * w..(y + 1) * w];
        for (x, o) in out.iter_mut().enumerate() {
            *o = kernel.iter().zip(&row[x..x + k]).map(|(a, b)| a * b).sum();
        }
    });
    let mut out = vec![0f32; ow * oh];
    par_rows(&mut out, ow, exec, |(y, dst)| {
        for (x, o) in dst.iter_mut().enumerate() {
            *o = kernel
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * horiz[(y + i) * ow + x])
                .sum();
        }
    });
    out
}

pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64, VisionError> {
    ssim_with(a, b, Exec::default())
}

/// Mean SSIM over the valid region, grayscale, 11x11 Gaussian window
/// (sigma 1.5), K1 = 0.01, K2 = 0.03, dynamic range 255.
pub fn ssim_with(a: &RgbImage, b: &RgbImage, exec: Exec) -> Result<f64, VisionError> {
    if a.dimensions() != b.dimensions() {
        return Err(VisionError::DimensionMismatch(a.width(), a.height(), b.width(), b.height()));
    }
    let pa = SsimBuffer::prepare(a, exec)?;
    let pb = SsimBuffer::prepare(b, exec)?;
    ssim_prepared(&pa, &pb, exec)
}

pub fn ssim_prepared(a: &SsimBuffer, b: &SsimBuffer, exec: Exec) -> Result<f64, VisionError> {
    if (a.src_width, a.src_height) != (b.src_width, b.src_height) {
        return Err(VisionError::DimensionMismatch(
            a.src_width,
            a.src_height,
            b.src_width,
            b.src_height,
        ));
    }
    let (w, h) = (a.gray.width, a.gray.height);
    let kernel = gaussian(a.window, SSIM_SIGMA);
    let cross: Vec<f32> = a
        .gray
        .data
        .iter()
        .zip(&b.gray.data)
        .map(|(x, y)| (x - CENTER) * (y - CENTER))
        .collect();
    let xy = blur_valid(&cross, w, h, &kernel, exec);
    let c = f64::from(CENTER);
    let total: f64 = (0..xy.len())
        .map(|i| {
            let (mx, my) = (f64::from(a.mu[i]), f64::from(b.mu[i]));
            let (cx, cy) = (mx - c, my - c);
            let vx = f64::from(a.sq[i]) - cx * cx;
            let vy = f64::from(b.sq[i]) - cy * cy;
            let cov = f64::from(xy[i]) - cx * cy;
            ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
        })
        .sum();
    Ok(total / xy.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn textured(w: u32, h: u32, seed: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            let v = (x.wrapping_mul(31) ^ y.wrapping_mul(17) ^ seed).wrapping_mul(2654435761) >> 24;
            Rgb([v as u8, (v as u8) / 2, 255 - v as u8])
        })
    }

    /// Direct (non-separable) evaluation in f64 with no caching or centering.
    fn naive_ssim(a: &RgbImage, b: &RgbImage) -> f64 {
        let la = to_luma(a, Exec::Sequential);
        let lb = to_luma(b, Exec::Sequential);
        let ws = window_for(la.width, la.height);
        let half = (ws / 2) as f64;
        let g: Vec<f64> = (0..ws)
            .map(|i| (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
            .collect();
        let gs: f64 = g.iter().sum();
        let mut total = 0.0;
        let mut count = 0usize;
        for y0 in 0..=(la.height - ws) {
            for x0 in 0..=(la.width - ws) {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for j in 0..ws {
                    for i in 0..ws {
                        let wgt = g[i] * g[j] / (gs * gs);
                        let p = f64::from(la.at(x0 + i, y0 + j));
                        let q = f64::from(lb.at(x0 + i, y0 + j));
                        mx += wgt * p;
                        my += wgt * q;
                        xx += wgt * p * p;
                        yy += wgt * q * q;
                        xy += wgt * p * q;
                    }
                }
                let (vx, vy, cv) = (xx - mx * mx, yy - my * my, xy - mx * my);
                total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cv + SSIM_C2))
                    / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn identical_is_one() {
        let a = textured(48, 40, 3);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn matches_naive_oracle() {
        let a = textured(40, 32, 1);
        let mut b = a.clone();
        for y in 10..20 {
            for x in 5..25 {
                b.put_pixel(x, y, Rgb([200, 10, 10]));
            }
        }
        let fast = ssim(&a, &b).unwrap();
        let slow = naive_ssim(&a, &b);
        assert!((fast - slow).abs() < 1e-5, "{fast} vs {slow}");
        let c = textured(40, 32, 99);
        assert!((ssim(&a, &c).unwrap() - naive_ssim(&a, &c)).abs() < 1e-5);
    }

    #[test]
    fn sequential_equals_parallel() {
        let a = textured(120, 80, 5);
        let b = textured(120, 80, 6);
        let s = ssim_with(&a, &b, Exec::Sequential).unwrap();
        let p = ssim_with(&a, &b, Exec::Parallel).unwrap();
        assert_eq!(s, p);
    }

    #[test]
    fn tiny_images_shrink_window() {
        let a = textured(4, 6, 1);
        let b = textured(4, 6, 2);
        let s = ssim(&a, &b).unwrap();
        assert!(s.is_finite() && s <= 1.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn dimension_mismatch() {
        assert!(matches!(
            ssim(&textured(10, 10, 0), &textured(10, 11, 0)),
            Err(VisionError::DimensionMismatch(..))
        ));
    }

    #[test]
    fn large_images_are_downsampled() {
        let a = textured(1920, 1080, 7);
        let p = SsimBuffer::prepare(&a, Exec::default()).unwrap();
        assert_eq!((p.gray().width, p.gray().height), (480, 270));
    }
}

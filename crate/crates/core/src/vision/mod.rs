//! Image features used by loop detection: DCT perceptual hash and SSIM.
//!
//! Both are computed from Rec.601 luma. Per-observation results are cached
//! in a [`FeatureCache`] so each screenshot is processed at most once no
//! matter how many comparisons it takes part in.

mod phash;
mod ssim;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};

use image::RgbImage;
use thiserror::Error;

pub use phash::{hamming, phash, phash_with, PHASH_GRID};
pub use ssim::{ssim, ssim_prepared, ssim_with, SsimBuffer, SSIM_C1, SSIM_C2, SSIM_MAX_SIDE, SSIM_SIGMA, SSIM_WINDOW};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VisionError {
    #[error("image has zero width or height")]
    DegenerateImage,
    #[error("image dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),
}

/// Whether data-parallel kernels may fan out over rayon.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

impl Exec {
    #[cfg_attr(not(feature = "parallel"), allow(dead_code))]
    pub(crate) fn parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

/// Row-major single-channel f32 buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct LumaBuffer {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl LumaBuffer {
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }
}

pub fn luma(r: u8, g: u8, b: u8) -> f32 {
    0.299 * f32::from(r) + 0.587 * f32::from(g) + 0.114 * f32::from(b)
}

pub fn to_luma(img: &RgbImage, exec: Exec) -> LumaBuffer {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let mut data = vec![0f32; w * h];
    let row = |(y, out): (usize, &mut [f32])| {
        let src = &raw[y * w * 3..(y + 1) * w * 3];
        for (o, px) in out.iter_mut().zip(src.chunks_exact(3)) {
            *o = luma(px[0], px[1], px[2]);
        }
    };
    par_rows(&mut data, w, exec, row);
    LumaBuffer {
        width: w,
        height: h,
        data,
    }
}

/// Runs `f` over each `width`-sized row of `data`, in parallel when allowed.
pub(crate) fn par_rows<F>(data: &mut [f32], width: usize, exec: Exec, f: F)
where
    F: Fn((usize, &mut [f32])) + Send + Sync,
{
    if width == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if exec.parallel() {
        use rayon::prelude::*;
        data.par_chunks_mut(width).enumerate().for_each(f);
        return;
    }
    let _ = exec;
    data.chunks_mut(width).enumerate().for_each(f);
}

/// Counts feature computations so the once-per-observation bound is checkable.
#[derive(Debug, Default)]
pub struct FeatureMetrics {
    pub phash_computed: AtomicU64,
    pub ssim_buffers_computed: AtomicU64,
    pub ssim_evaluated: AtomicU64,
    pub hash_gate_rejections: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MetricsSnapshot {
    pub phash_computed: u64,
    pub ssim_buffers_computed: u64,
    pub ssim_evaluated: u64,
    pub hash_gate_rejections: u64,
}

impl FeatureMetrics {
    pub fn snapshot(&self) -> MetricsSnapshot {
        MetricsSnapshot {
            phash_computed: self.phash_computed.load(Ordering::Relaxed),
            ssim_buffers_computed: self.ssim_buffers_computed.load(Ordering::Relaxed),
            ssim_evaluated: self.ssim_evaluated.load(Ordering::Relaxed),
            hash_gate_rejections: self.hash_gate_rejections.load(Ordering::Relaxed),
        }
    }

    pub(crate) fn bump(counter: &AtomicU64) {
        counter.fetch_add(1, Ordering::Relaxed);
    }
}

pub(crate) fn check_dims(img: &RgbImage) -> Result<(), VisionError> {
    if img.width() == 0 || img.height() == 0 {
        Err(VisionError::DegenerateImage)
    } else {
        Ok(())
    }
}

/// Write-once feature slots for one screenshot.
#[derive(Debug, Default)]
pub struct FeatureCache {
    phash: OnceLock<u64>,
    ssim: OnceLock<Arc<SsimBuffer>>,
}

impl FeatureCache {
    pub fn phash(&self, img: &RgbImage, metrics: Option<&FeatureMetrics>) -> Result<u64, VisionError> {
        check_dims(img)?;
        Ok(*self.phash.get_or_init(|| {
            if let Some(m) = metrics {
                FeatureMetrics::bump(&m.phash_computed);
            }
            phash(img).expect("dimensions checked")
        }))
    }

    pub fn ssim_buffer(
        &self,
        img: &RgbImage,
        metrics: Option<&FeatureMetrics>,
    ) -> Result<Arc<SsimBuffer>, VisionError> {
        check_dims(img)?;
        Ok(self
            .ssim
            .get_or_init(|| {
                if let Some(m) = metrics {
                    FeatureMetrics::bump(&m.ssim_buffers_computed);
                }
                Arc::new(SsimBuffer::prepare(img, Exec::default()).expect("dimensions checked"))
            })
            .clone())
    }

    pub fn cached_phash(&self) -> Option<u64> {
        self.phash.get().copied()
    }

    pub fn has_ssim_buffer(&self) -> bool {
        self.ssim.get().is_some()
    }
}

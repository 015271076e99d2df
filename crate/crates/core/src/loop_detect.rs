//! Rule-based loop detection.
//!
//! Steps `u` and `v` match when their screenshots pass the image cascade
//! (pHash Hamming gate, then SSIM) and their actions are similar. A loop is
//! reported when the last `N` steps match, position by position, some
//! earlier disjoint window of `N` steps; the scan goes from the most recent
//! candidate start backwards and stops at the first hit.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actions::{action_similarity, Action, ActionError, Point, ScreenGeometry, SimilarityConfig};
use crate::trajectory::{Observation, Step};
use crate::vision::{hamming, ssim_prepared, Exec, FeatureMetrics, VisionError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub window: usize,
    pub phash_hamming_max: u32,
    pub ssim_min: f64,
    pub coord_tolerance_fraction: f64,
    pub levenshtein_min: f64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            window: 3,
            phash_hamming_max: 1,
            ssim_min: 0.99,
            coord_tolerance_fraction: 0.05,
            levenshtein_min: 0.9,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LoopError {
    #[error("invalid loop config: {0}")]
    Config(String),
    #[error(transparent)]
    Vision(#[from] VisionError),
    #[error(transparent)]
    Action(#[from] ActionError),
    #[error("step index {0} out of range")]
    Index(usize),
}

impl LoopConfig {
    pub fn validate(&self) -> Result<(), LoopError> {
        if self.window < 2 {
            return Err(LoopError::Config("window must be >= 2".into()));
        }
        if !(self.ssim_min > 0.0 && self.ssim_min <= 1.0) {
            return Err(LoopError::Config("ssim_min must be in (0, 1]".into()));
        }
        if self.phash_hamming_max > 64 {
            return Err(LoopError::Config("phash_hamming_max must be <= 64".into()));
        }
        Ok(())
    }

    pub fn similarity(&self) -> SimilarityConfig {
        SimilarityConfig {
            coord_tolerance_fraction: self.coord_tolerance_fraction,
            levenshtein_min: self.levenshtein_min,
        }
    }
}

/// Steps `[historical_start, historical_start + length)` repeat the current
/// window `[current_start, current_start + length)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopMatch {
    pub historical_start: usize,
    pub current_start: usize,
    pub length: usize,
}

/// What the detector needs from a step.
pub trait LoopEntry {
    fn observation(&self) -> &Observation;
    fn action(&self) -> &Action;
    fn points(&self) -> Option<&[Point]>;
}

impl LoopEntry for Step {
    fn observation(&self) -> &Observation {
        &self.observation
    }

    fn action(&self) -> &Action {
        &self.action
    }

    fn points(&self) -> Option<&[Point]> {
        Step::points(self)
    }
}

/// Minimal step record for detection outside a live trajectory.
#[derive(Debug, Clone)]
pub struct LoopRecord {
    pub observation: Observation,
    pub action: Action,
    pub points: Option<Vec<Point>>,
}

impl LoopEntry for LoopRecord {
    fn observation(&self) -> &Observation {
        &self.observation
    }

    fn action(&self) -> &Action {
        &self.action
    }

    fn points(&self) -> Option<&[Point]> {
        self.points.as_deref()
    }
}

/// S_img: Hamming gate on cached pHashes, then SSIM on cached buffers. SSIM
/// is only evaluated for pairs that pass the gate.
pub fn image_similarity(
    a: &Observation,
    b: &Observation,
    cfg: &LoopConfig,
    metrics: Option<&FeatureMetrics>,
) -> Result<bool, VisionError> {
    if a.dimensions() != b.dimensions() {
        let ((aw, ah), (bw, bh)) = (a.dimensions(), b.dimensions());
        return Err(VisionError::DimensionMismatch(aw, ah, bw, bh));
    }
    let (ha, hb) = (a.phash(metrics)?, b.phash(metrics)?);
    if hamming(ha, hb) > cfg.phash_hamming_max {
        if let Some(m) = metrics {
            FeatureMetrics::bump(&m.hash_gate_rejections);
        }
        return Ok(false);
    }
    let (sa, sb) = (a.ssim_buffer(metrics)?, b.ssim_buffer(metrics)?);
    if let Some(m) = metrics {
        FeatureMetrics::bump(&m.ssim_evaluated);
    }
    Ok(ssim_prepared(&sa, &sb, Exec::default())? >= cfg.ssim_min)
}

/// M(u, v) = S_img(o_u, o_v) and S_act(a_u, a_v). Evaluates the action
/// predicate first since it is the cheaper of the two.
pub fn joint_match<E: LoopEntry>(
    entries: &[E],
    u: usize,
    v: usize,
    cfg: &LoopConfig,
    geom: ScreenGeometry,
    metrics: Option<&FeatureMetrics>,
) -> Result<bool, LoopError> {
    let (a, b) = (entries.get(u).ok_or(LoopError::Index(u))?, entries.get(v).ok_or(LoopError::Index(v))?);
    if !action_similarity(a.action(), b.action(), &geom, a.points(), b.points(), &cfg.similarity())? {
        return Ok(false);
    }
    Ok(image_similarity(a.observation(), b.observation(), cfg, metrics)?)
}

/// Loop detection over all of `entries` (T = entries.len()). Pairs that
/// cannot be compared (missing coordinates, mismatched sizes) count as
/// non-matching.
pub fn detect_loop<E: LoopEntry>(
    entries: &[E],
    cfg: &LoopConfig,
    geom: ScreenGeometry,
    metrics: Option<&FeatureMetrics>,
) -> Option<LoopMatch> {
    let n = cfg.window;
    let t = entries.len();
    if n == 0 || t < 2 * n {
        return None;
    }
    let cur = t - n;
    (0..=t - 2 * n).rev().find_map(|k| {
        (0..n)
            .all(|j| match joint_match(entries, k + j, cur + j, cfg, geom, metrics) {
                Ok(m) => m,
                Err(e) => {
                    tracing::debug!(k, j, error = %e, "pair not comparable");
                    false
                }
            })
            .then_some(LoopMatch {
                historical_start: k,
                current_start: cur,
                length: n,
            })
    })
}

/// `detect_loop` on every prefix `entries[..t]` for `t` in `0..=len`.
pub fn detect_loop_prefixes<E: LoopEntry + Sync>(
    entries: &[E],
    cfg: &LoopConfig,
    geom: ScreenGeometry,
    metrics: Option<&FeatureMetrics>,
    exec: Exec,
) -> Vec<Option<LoopMatch>> {
    let one = |t: usize| detect_loop(&entries[..t], cfg, geom, metrics);
    #[cfg(feature = "parallel")]
    if exec == Exec::Parallel {
        use rayon::prelude::*;
        return (0..=entries.len()).into_par_iter().map(one).collect();
    }
    let _ = exec;
    (0..=entries.len()).map(one).collect()
}

/// Detector bound to one configuration and a shared metrics sink.
#[derive(Debug, Clone)]
pub struct LoopDetector {
    cfg: LoopConfig,
    geom: ScreenGeometry,
    metrics: Arc<FeatureMetrics>,
}

impl LoopDetector {
    pub fn new(cfg: LoopConfig, geom: ScreenGeometry) -> Result<Self, LoopError> {
        cfg.validate()?;
        Ok(LoopDetector {
            cfg,
            geom,
            metrics: Arc::new(FeatureMetrics::default()),
        })
    }

    pub fn with_metrics(mut self, metrics: Arc<FeatureMetrics>) -> Self {
        self.metrics = metrics;
        self
    }

    pub fn config(&self) -> &LoopConfig {
        &self.cfg
    }

    pub fn metrics(&self) -> &Arc<FeatureMetrics> {
        &self.metrics
    }

    pub fn detect<E: LoopEntry>(&self, entries: &[E]) -> Option<LoopMatch> {
        detect_loop(entries, &self.cfg, self.geom, Some(&self.metrics))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::sprites::render_tiles;
    use image::RgbImage;

    fn img(seed: u8) -> RgbImage {
        let layout = vec![vec![seed % 16, (seed + 3) % 16, (seed + 7) % 16], vec![(seed + 11) % 16, 1, seed % 5]];
        render_tiles(&layout, 96, 64)
    }

    fn rec(seed: u8, action: Action, p: Option<(i32, i32)>) -> LoopRecord {
        LoopRecord {
            observation: Observation::new(img(seed), 0),
            action,
            points: p.map(|(x, y)| vec![Point::new(x, y)]),
        }
    }

    /// Direct transcription of the scan with fresh, uncached features.
    fn oracle(entries: &[LoopRecord], cfg: &LoopConfig, geom: ScreenGeometry) -> Option<usize> {
        let n = cfg.window;
        let t = entries.len();
        if t < 2 * n {
            return None;
        }
        let m = |u: usize, v: usize| -> bool {
            let (a, b) = (&entries[u], &entries[v]);
            let act = action_similarity(&a.action, &b.action, &geom, a.points(), b.points(), &cfg.similarity())
                .unwrap_or(false);
            let (ia, ib) = (a.observation.image(), b.observation.image());
            let h = hamming(crate::vision::phash(ia).unwrap(), crate::vision::phash(ib).unwrap());
            act && h <= cfg.phash_hamming_max && crate::vision::ssim(ia, ib).unwrap() >= cfg.ssim_min
        };
        let mut hits: Vec<usize> = (0..=t - 2 * n).filter(|&k| (0..n).all(|j| m(k + j, t - n + j))).collect();
        hits.pop()
    }

    fn geom() -> ScreenGeometry {
        ScreenGeometry::new(1920, 1080).unwrap()
    }

    fn repeat_six(shift: i32) -> Vec<LoopRecord> {
        let c = |d: &str| Action::click(d);
        vec![
            rec(1, c("a"), Some((100, 100))),
            rec(2, c("b"), Some((400, 300))),
            rec(3, c("c"), Some((900, 500))),
            rec(1, c("a"), Some((100 + shift, 100))),
            rec(2, c("b"), Some((400, 300))),
            rec(3, c("c"), Some((900, 500))),
        ]
    }

    #[test]
    fn short_trajectory_has_no_loop() {
        let e = repeat_six(0);
        assert_eq!(detect_loop(&e[..5], &LoopConfig::default(), geom(), None), None);
    }

    #[test]
    fn repeated_triple_matches_at_zero() {
        let e = repeat_six(0);
        let m = detect_loop(&e, &LoopConfig::default(), geom(), None).unwrap();
        assert_eq!(m, LoopMatch { historical_start: 0, current_start: 3, length: 3 });
        assert_eq!(oracle(&e, &LoopConfig::default(), geom()), Some(0));
    }

    #[test]
    fn shifted_click_breaks_loop() {
        let shift = (0.10 * geom().diagonal()).round() as i32;
        let e = repeat_six(shift);
        assert_eq!(detect_loop(&e, &LoopConfig::default(), geom(), None), None);
        assert_eq!(oracle(&e, &LoopConfig::default(), geom()), None);
    }

    #[test]
    fn most_recent_match_wins() {
        let w = |s: u8| rec(s, Action::hotkey(["ctrl", "z"]), None);
        let e: Vec<LoopRecord> = [5, 6, 5, 6, 5, 6, 5, 6].into_iter().map(w).collect();
        let cfg = LoopConfig { window: 2, ..Default::default() };
        let m = detect_loop(&e, &cfg, geom(), None).unwrap();
        assert_eq!(m.historical_start, 4);
        assert_eq!(oracle(&e, &cfg, geom()), Some(4));
    }

    #[test]
    fn joint_match_components() {
        let e = vec![
            rec(1, Action::click("x"), Some((5, 5))),
            rec(1, Action::hotkey(["a"]), None),
            rec(9, Action::click("x"), Some((5, 5))),
        ];
        let cfg = LoopConfig::default();
        assert!(joint_match(&e, 0, 0, &cfg, geom(), None).unwrap());
        assert!(!joint_match(&e, 0, 1, &cfg, geom(), None).unwrap());
        assert!(!joint_match(&e, 0, 2, &cfg, geom(), None).unwrap());
    }

    #[test]
    fn hash_gate_skips_ssim() {
        let m = FeatureMetrics::default();
        let (a, b) = (Observation::new(img(1), 0), Observation::new(img(8), 1));
        assert!(!image_similarity(&a, &b, &LoopConfig::default(), Some(&m)).unwrap());
        let s = m.snapshot();
        assert_eq!((s.phash_computed, s.ssim_buffers_computed, s.ssim_evaluated, s.hash_gate_rejections), (2, 0, 0, 1));
        assert!(image_similarity(&a, &a.clone(), &LoopConfig::default(), Some(&m)).unwrap());
        let s = m.snapshot();
        assert_eq!((s.phash_computed, s.ssim_buffers_computed, s.ssim_evaluated), (2, 1, 1));
    }

    #[test]
    fn config_validation() {
        assert!(LoopConfig { window: 1, ..Default::default() }.validate().is_err());
        assert!(LoopConfig { ssim_min: 0.0, ..Default::default() }.validate().is_err());
        assert!(LoopConfig { phash_hamming_max: 65, ..Default::default() }.validate().is_err());
        assert!(LoopConfig::default().validate().is_ok());
    }

    #[test]
    fn prefixes_agree_across_exec_modes() {
        let e = repeat_six(0);
        let cfg = LoopConfig::default();
        let s = detect_loop_prefixes(&e, &cfg, geom(), None, Exec::Sequential);
        let p = detect_loop_prefixes(&e, &cfg, geom(), None, Exec::Parallel);
        assert_eq!(s, p);
        assert_eq!(s.len(), 7);
        assert!(s[..6].iter().all(Option::is_none));
        assert!(s[6].is_some());
    }
}

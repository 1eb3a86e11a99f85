//! Gaussian-prior pseudo labels.
//!
//! A CAM highlights the most discriminative parts of an object. Treating
//! each pixel as a sample weighted by its response and fitting a bivariate
//! Gaussian recovers a blob covering the whole object; taking the pointwise
//! maximum of the CAM and the (gated, peak-normalized) Gaussian fills in
//! object-interior pixels the CAM missed. Double thresholding then splits
//! pixels into foreground, background, and an uncertain band that the
//! segmentation loss ignores.

use crate::cam::CamMap;
use crate::error::{Result, WsolError};

/// Floor for the fitted standard deviations.
pub const SIGMA_FLOOR: f64 = 1e-6;
/// The correlation is clamped to ±(1 − RHO_MARGIN) to keep the density
/// finite.
pub const RHO_MARGIN: f64 = 1e-6;

/// Weighted bivariate Gaussian: means and standard deviations in pixels at
/// CAM resolution, `rho` dimensionless.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianParams {
    pub mu_x: f64,
    pub mu_y: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub rho: f64,
}

/// Fits the Gaussian by weighted moments. Every pixel `(x, y)` is a sample
/// with weight equal to the CAM response; coordinates are pixel-center
/// integers. Second moments carry no small-sample correction: the weights
/// are responses, not frequency counts.
pub fn fit_weighted_gaussian(cam: &CamMap) -> Result<GaussianParams> {
    let mut total = 0.0f64;
    let mut sum_x = 0.0f64;
    let mut sum_y = 0.0f64;
    for y in 0..cam.h {
        for x in 0..cam.w {
            let w = cam.at(y, x) as f64;
            total += w;
            sum_x += w * x as f64;
            sum_y += w * y as f64;
        }
    }
    if total <= 0.0 {
        return Err(WsolError::EmptyCam);
    }
    let mu_x = sum_x / total;
    let mu_y = sum_y / total;

    let mut var_x = 0.0f64;
    let mut var_y = 0.0f64;
    let mut cov = 0.0f64;
    for y in 0..cam.h {
        for x in 0..cam.w {
            let w = cam.at(y, x) as f64;
            let dx = x as f64 - mu_x;
            let dy = y as f64 - mu_y;
            var_x += w * dx * dx;
            var_y += w * dy * dy;
            cov += w * dx * dy;
        }
    }
    var_x /= total;
    var_y /= total;
    cov /= total;

    let raw_sx = var_x.sqrt();
    let raw_sy = var_y.sqrt();
    // A point mass has zero spread in some axis; its correlation is
    // undefined, so use 0 rather than 0/0.
    let rho = if raw_sx * raw_sy == 0.0 {
        0.0
    } else {
        (cov / (raw_sx * raw_sy)).clamp(-(1.0 - RHO_MARGIN), 1.0 - RHO_MARGIN)
    };
    Ok(GaussianParams {
        mu_x,
        mu_y,
        sigma_x: raw_sx.max(SIGMA_FLOOR),
        sigma_y: raw_sy.max(SIGMA_FLOOR),
        rho,
    })
}

/// Unnormalized bivariate Gaussian density at `(x, y)`.
pub fn density(p: &GaussianParams, x: f64, y: f64) -> f64 {
    let dx = x - p.mu_x;
    let dy = y - p.mu_y;
    let theta = (dx * dx) / (p.sigma_x * p.sigma_x)
        - 2.0 * p.rho * dx * dy / (p.sigma_x * p.sigma_y)
        + (dy * dy) / (p.sigma_y * p.sigma_y);
    let one_m_r2 = 1.0 - p.rho * p.rho;
    (-theta / (2.0 * one_m_r2)).exp()
        / (2.0 * std::f64::consts::PI * p.sigma_x * p.sigma_y * one_m_r2.sqrt())
}

/// Evaluates the density at every pixel center and divides by the map's
/// maximum, so the peak is exactly 1.
pub fn render_gaussian(p: &GaussianParams, h: usize, w: usize) -> CamMap {
    let mut values = vec![0.0f64; h * w];
    let mut max = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            let v = density(p, x as f64, y as f64);
            values[y * w + x] = v;
            if v > max {
                max = v;
            }
        }
    }
    // The density is strictly positive, so max > 0 whenever h*w > 0.
    let out: Vec<f32> = values.iter().map(|v| (v / max).min(1.0) as f32).collect();
    CamMap::new(h, w, out, None)
}

/// Pointwise maximum of the CAM and the hard-gated Gaussian map: Gaussian
/// values must exceed `t_gauss` to count as foreground evidence at all.
pub fn enhance_cam(cam: &CamMap, gmap: &CamMap, t_gauss: f64) -> Result<CamMap> {
    if cam.h != gmap.h || cam.w != gmap.w {
        return Err(WsolError::Format {
            what: "enhance_cam inputs",
            detail: format!(
                "shape mismatch: {}x{} vs {}x{}",
                cam.h, cam.w, gmap.h, gmap.w
            ),
        });
    }
    let values = cam
        .values
        .iter()
        .zip(&gmap.values)
        .map(|(&c, &g)| {
            let gated = if (g as f64) > t_gauss { g } else { 0.0 };
            c.max(gated)
        })
        .collect();
    Ok(CamMap::new(cam.h, cam.w, values, cam.source_class))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelClass {
    Foreground,
    Background,
    Conflict,
}

/// Per-pixel trichotomy with the derived supervision planes: `positive`
/// (foreground → 1) and `weight` (conflict → 0, else 1).
#[derive(Debug, Clone)]
pub struct PseudoLabel {
    pub h: usize,
    pub w: usize,
    pub classes: Vec<PixelClass>,
}

impl PseudoLabel {
    pub fn positive_plane(&self) -> Vec<f32> {
        self.classes
            .iter()
            .map(|c| if *c == PixelClass::Foreground { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn weight_plane(&self) -> Vec<f32> {
        self.classes
            .iter()
            .map(|c| if *c == PixelClass::Conflict { 0.0 } else { 1.0 })
            .collect()
    }

    pub fn count(&self, class: PixelClass) -> usize {
        self.classes.iter().filter(|c| **c == class).count()
    }
}

/// Double-threshold split: value > `t_fg` is foreground, value < `t_bg` is
/// background, everything between is conflict.
pub fn trichotomize(enhanced: &CamMap, t_fg: f64, t_bg: f64) -> Result<PseudoLabel> {
    if !(0.0 <= t_bg && t_bg < t_fg && t_fg <= 1.0) {
        return Err(WsolError::BadThresholds { t_bg, t_fg });
    }
    let classes = enhanced
        .values
        .iter()
        .map(|&v| {
            let v = v as f64;
            if v > t_fg {
                PixelClass::Foreground
            } else if v < t_bg {
                PixelClass::Background
            } else {
                PixelClass::Conflict
            }
        })
        .collect();
    Ok(PseudoLabel {
        h: enhanced.h,
        w: enhanced.w,
        classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam(h: usize, w: usize, values: Vec<f32>) -> CamMap {
        CamMap::new(h, w, values, Some(0))
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
    }

    // ── Fitting ──────────────────────────────────────────────────────

    #[test]
    fn uniform_three_by_three_fit() {
        // Uniform weights over coords {0,1,2}²: mean 1, variance
        // E[(x-1)²] = (1+0+1)/3 = 2/3, no correlation.
        let p = fit_weighted_gaussian(&cam(3, 3, vec![1.0; 9])).unwrap();
        assert!(rel_err(p.mu_x, 1.0) < 1e-9);
        assert!(rel_err(p.mu_y, 1.0) < 1e-9);
        assert!(rel_err(p.sigma_x * p.sigma_x, 2.0 / 3.0) < 1e-9);
        assert!(rel_err(p.sigma_y * p.sigma_y, 2.0 / 3.0) < 1e-9);
        assert_eq!(p.rho, 0.0);
    }

    #[test]
    fn point_mass_fit_is_floored() {
        let mut v = vec![0.0; 5 * 6];
        v[3 * 6 + 2] = 0.8; // x = 2, y = 3
        let p = fit_weighted_gaussian(&cam(5, 6, v)).unwrap();
        assert_eq!(p.mu_x, 2.0);
        assert_eq!(p.mu_y, 3.0);
        assert_eq!(p.sigma_x, SIGMA_FLOOR);
        assert_eq!(p.sigma_y, SIGMA_FLOOR);
        assert_eq!(p.rho, 0.0);
    }

    #[test]
    fn correlated_two_point_fit_clamps_rho() {
        // Equal mass at (0,0) and (2,2): mean (1,1), variances 1, and a
        // perfect correlation that must be clamped.
        let mut v = vec![0.0; 9];
        v[0] = 0.5;
        v[2 * 3 + 2] = 0.5;
        let p = fit_weighted_gaussian(&cam(3, 3, v)).unwrap();
        assert!(rel_err(p.mu_x, 1.0) < 1e-9);
        assert!(rel_err(p.mu_y, 1.0) < 1e-9);
        assert!(rel_err(p.sigma_x * p.sigma_x, 1.0) < 1e-9);
        assert!(rel_err(p.sigma_y * p.sigma_y, 1.0) < 1e-9);
        assert_eq!(p.rho, 1.0 - RHO_MARGIN);
    }

    #[test]
    fn empty_cam_is_rejected() {
        assert!(matches!(
            fit_weighted_gaussian(&cam(4, 4, vec![0.0; 16])),
            Err(WsolError::EmptyCam)
        ));
    }

    #[test]
    fn fit_is_scale_invariant() {
        let base: Vec<f32> = (0..64).map(|i| ((i * 37 % 19) as f32) / 19.0).collect();
        let p0 = fit_weighted_gaussian(&cam(8, 8, base.clone())).unwrap();
        // A power-of-two scale is exact in f32, so the moments factor and
        // the fit is bitwise unchanged.
        let exact: Vec<f32> = base.iter().map(|v| v * 0.25).collect();
        let p1 = fit_weighted_gaussian(&cam(8, 8, exact)).unwrap();
        assert_eq!(p0.mu_x, p1.mu_x);
        assert_eq!(p0.mu_y, p1.mu_y);
        assert_eq!(p0.sigma_x, p1.sigma_x);
        assert_eq!(p0.sigma_y, p1.sigma_y);
        assert_eq!(p0.rho, p1.rho);
        // An arbitrary scale rounds each weight independently; invariance
        // then holds to f32 rounding.
        let rounded: Vec<f32> = base.iter().map(|v| v * 0.37).collect();
        let p2 = fit_weighted_gaussian(&cam(8, 8, rounded)).unwrap();
        assert!(rel_err(p0.mu_x, p2.mu_x) < 1e-6);
        assert!(rel_err(p0.mu_y, p2.mu_y) < 1e-6);
        assert!(rel_err(p0.sigma_x, p2.sigma_x) < 1e-6);
        assert!(rel_err(p0.sigma_y, p2.sigma_y) < 1e-6);
        assert!(rel_err(p0.rho, p2.rho) < 1e-6);
    }

    #[test]
    fn fit_is_translation_equivariant() {
        // A fast-decaying blob whose mass at any grid border is below 1e-10
        // of the total, shifted by (3, 2): mean moves exactly, spread and
        // correlation stay put.
        const N: usize = 32;
        let blob = |y: usize, x: usize| -> f32 {
            let dy = y as f32 - 8.0;
            let dx = x as f32 - 9.0;
            (-(dx * dx + 0.8 * dy * dy + 0.3 * dx * dy) / 2.0).exp()
        };
        let a: Vec<f32> = (0..N * N).map(|i| blob(i / N, i % N)).collect();
        let b: Vec<f32> = (0..N * N)
            .map(|i| {
                let (y, x) = (i / N, i % N);
                if y >= 2 && x >= 3 {
                    blob(y - 2, x - 3)
                } else {
                    0.0
                }
            })
            .collect();
        let pa = fit_weighted_gaussian(&cam(N, N, a)).unwrap();
        let pb = fit_weighted_gaussian(&cam(N, N, b)).unwrap();
        assert!(rel_err(pb.mu_x, pa.mu_x + 3.0) < 1e-6);
        assert!(rel_err(pb.mu_y, pa.mu_y + 2.0) < 1e-6);
        assert!(rel_err(pb.sigma_x, pa.sigma_x) < 1e-6);
        assert!(rel_err(pb.sigma_y, pa.sigma_y) < 1e-6);
        assert!(rel_err(pb.rho, pa.rho) < 1e-6);
    }

    // ── Rendering ────────────────────────────────────────────────────

    #[test]
    fn density_peak_matches_closed_form_when_uncorrelated() {
        let p = GaussianParams {
            mu_x: 10.0,
            mu_y: 12.0,
            sigma_x: 3.0,
            sigma_y: 5.0,
            rho: 0.0,
        };
        let want = 1.0 / (2.0 * std::f64::consts::PI * 3.0 * 5.0);
        assert!(rel_err(density(&p, 10.0, 12.0), want) < 1e-12);
    }

    #[test]
    fn rendered_map_peaks_at_one() {
        let p = GaussianParams {
            mu_x: 7.3,
            mu_y: 4.1,
            sigma_x: 2.0,
            sigma_y: 1.5,
            rho: 0.4,
        };
        let map = render_gaussian(&p, 16, 16);
        let max = map.values.iter().cloned().fold(0.0f32, f32::max);
        assert_eq!(max, 1.0);
    }

    #[test]
    fn density_integrates_to_one() {
        // sigma = 5 on a 101x101 grid centered at the mean: the Riemann sum
        // with unit pixel area approximates the integral of a normalized
        // density.
        let p = GaussianParams {
            mu_x: 50.0,
            mu_y: 50.0,
            sigma_x: 5.0,
            sigma_y: 5.0,
            rho: 0.0,
        };
        let mut sum = 0.0f64;
        for y in 0..101 {
            for x in 0..101 {
                sum += density(&p, x as f64, y as f64);
            }
        }
        assert!((sum - 1.0).abs() < 0.01, "Riemann sum {sum}");
    }

    // ── Enhancement ──────────────────────────────────────────────────

    #[test]
    fn enhance_gates_then_takes_max() {
        let c = cam(1, 3, vec![0.9, 0.1, 0.3]);
        let g = CamMap::new(1, 3, vec![0.0, 0.8, 0.6], None);
        let out = enhance_cam(&c, &g, 0.7).unwrap();
        // 0.9 vs gated 0.0; 0.1 vs kept 0.8; 0.6 is gated away (<= 0.7).
        assert_eq!(out.values, vec![0.9, 0.8, 0.3]);
    }

    #[test]
    fn enhance_never_decreases_the_cam() {
        let c = cam(4, 4, (0..16).map(|i| i as f32 / 15.0).collect());
        let g = CamMap::new(4, 4, (0..16).rev().map(|i| i as f32 / 15.0).collect(), None);
        let out = enhance_cam(&c, &g, 0.7).unwrap();
        for (o, i) in out.values.iter().zip(&c.values) {
            assert!(o >= i);
        }
    }

    #[test]
    fn enhance_rejects_shape_mismatch() {
        let c = cam(2, 2, vec![0.0; 4]);
        let g = CamMap::new(2, 3, vec![0.0; 6], None);
        assert!(enhance_cam(&c, &g, 0.7).is_err());
    }

    // ── Trichotomy ───────────────────────────────────────────────────

    #[test]
    fn trichotomy_thresholds() {
        let c = cam(1, 3, vec![0.6, 0.001, 0.1]);
        let label = trichotomize(&c, 0.5, 0.004).unwrap();
        assert_eq!(label.classes[0], PixelClass::Foreground);
        assert_eq!(label.classes[1], PixelClass::Background);
        assert_eq!(label.classes[2], PixelClass::Conflict);
        assert_eq!(label.positive_plane(), vec![1.0, 0.0, 0.0]);
        assert_eq!(label.weight_plane(), vec![1.0, 1.0, 0.0]);
    }

    #[test]
    fn trichotomy_partitions_all_pixels() {
        let c = cam(8, 8, (0..64).map(|i| i as f32 / 63.0).collect());
        let label = trichotomize(&c, 0.5, 0.004).unwrap();
        let total = label.count(PixelClass::Foreground)
            + label.count(PixelClass::Background)
            + label.count(PixelClass::Conflict);
        assert_eq!(total, 64);
    }

    #[test]
    fn trichotomy_rejects_bad_threshold_order() {
        let c = cam(2, 2, vec![0.5; 4]);
        assert!(matches!(
            trichotomize(&c, 0.1, 0.5),
            Err(WsolError::BadThresholds { .. })
        ));
    }

    #[test]
    fn raising_t_fg_never_grows_foreground() {
        let c = cam(8, 8, (0..64).map(|i| (i as f32 * 0.618) % 1.0).collect());
        let lo = trichotomize(&c, 0.4, 0.004).unwrap();
        let hi = trichotomize(&c, 0.8, 0.004).unwrap();
        assert!(hi.count(PixelClass::Foreground) <= lo.count(PixelClass::Foreground));
        let bg_lo = trichotomize(&c, 0.5, 0.001).unwrap();
        let bg_hi = trichotomize(&c, 0.5, 0.2).unwrap();
        assert!(bg_lo.count(PixelClass::Background) <= bg_hi.count(PixelClass::Background));
    }
}

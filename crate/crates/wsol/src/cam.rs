//! Single-channel activation maps in [0, 1].

use wsol_tensor::{bilinear_resize_2d, Tensor};

use crate::config::UpsampleKind;

/// A normalized activation map. `source_class` records which classifier row
/// produced it; maps synthesized by other means (e.g. a rendered Gaussian)
/// carry `None`.
#[derive(Debug, Clone)]
pub struct CamMap {
    pub h: usize,
    pub w: usize,
    pub values: Vec<f32>,
    pub source_class: Option<usize>,
}

impl CamMap {
    pub fn new(h: usize, w: usize, values: Vec<f32>, source_class: Option<usize>) -> CamMap {
        assert_eq!(values.len(), h * w, "CAM data does not match its shape");
        debug_assert!(
            values.iter().all(|v| (0.0..=1.0).contains(v)),
            "CAM values must lie in [0,1]"
        );
        CamMap {
            h,
            w,
            values,
            source_class,
        }
    }

    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.w + x]
    }

    /// Resizes to `(h, w)`; values stay in [0, 1] because both kinds
    /// interpolate convexly.
    pub fn resized(&self, h: usize, w: usize, kind: UpsampleKind) -> CamMap {
        if h == self.h && w == self.w {
            return self.clone();
        }
        let src = Tensor::new(vec![self.h, self.w], self.values.clone()).expect("shape checked");
        let values = match kind {
            UpsampleKind::Bilinear => bilinear_resize_2d(&src, h, w).into_data(),
            UpsampleKind::Nearest => {
                let mut out = Vec::with_capacity(h * w);
                for oy in 0..h {
                    let iy = (oy * self.h / h).min(self.h - 1);
                    for ox in 0..w {
                        let ix = (ox * self.w / w).min(self.w - 1);
                        out.push(self.at(iy, ix));
                    }
                }
                out
            }
        };
        CamMap::new(h, w, values, self.source_class)
    }
}

/// Rescales raw non-negative activations so the maximum becomes 1. An
/// all-zero plane stays all-zero; a positive constant plane becomes all-one.
pub fn minmax_normalize(values: &mut [f32]) {
    let max = values.iter().cloned().fold(0.0f32, f32::max);
    if max == 0.0 {
        return;
    }
    let min = values.iter().cloned().fold(f32::INFINITY, f32::min);
    if max == min {
        values.iter_mut().for_each(|v| *v = 1.0);
        return;
    }
    let inv = 1.0 / (max - min);
    values.iter_mut().for_each(|v| *v = (*v - min) * inv);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_reaches_one_when_any_activation_is_positive() {
        let mut v = vec![0.0, 0.2, 0.8];
        minmax_normalize(&mut v);
        assert_eq!(v, vec![0.0, 0.25, 1.0]);
    }

    #[test]
    fn normalize_keeps_zero_plane_zero() {
        let mut v = vec![0.0; 4];
        minmax_normalize(&mut v);
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn normalize_lifts_positive_constant_to_one() {
        let mut v = vec![0.3; 4];
        minmax_normalize(&mut v);
        assert!(v.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn resize_is_identity_at_same_size() {
        let cam = CamMap::new(2, 2, vec![0.0, 0.5, 0.5, 1.0], Some(1));
        let out = cam.resized(2, 2, UpsampleKind::Bilinear);
        assert_eq!(out.values, cam.values);
        assert_eq!(out.source_class, Some(1));
    }
}

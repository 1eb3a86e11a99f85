//! Synthetic localization dataset: one textured shape per image on a
//! cluttered background. The class is the shape kind; the tight box around
//! the shape is recorded for evaluation only. Every sample is a pure
//! function of (seed, index), so splits and reruns are exactly
//! reproducible without storing pixels.

use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use wsol_tensor::{bilinear_resize_2d, Tensor};

use crate::error::{Result, WsolError};
use crate::localization::BBox;
use crate::seeding::{derive_rng, mix64, streams};

pub const NUM_CLASSES: usize = 4;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["circle", "square", "triangle", "cross"];

#[derive(Debug, Clone)]
pub struct Sample {
    /// (3, size, size) RGB in [0, 1].
    pub image: Tensor<f32>,
    pub label: usize,
    /// Tight box around the shape; evaluation only, never used in training.
    pub gt_box: BBox,
}

/// Fraction of the image area the shape must cover.
const MIN_AREA_FRAC: f64 = 0.05;
const MAX_AREA_FRAC: f64 = 0.50;

/// Checks that every shape kind has a nonempty size range at this
/// resolution.
fn check_placeable(size: usize) -> Result<()> {
    if size < 32 {
        return Err(WsolError::Config(format!(
            "image_size {size} is too small to place shapes within the \
             {:.0}%-{:.0}% area band",
            MIN_AREA_FRAC * 100.0,
            MAX_AREA_FRAC * 100.0
        )));
    }
    Ok(())
}

struct ShapeRaster {
    mask: Vec<bool>,
    bbox: BBox,
}

fn raster_bbox(size: usize, mask: &[bool]) -> BBox {
    let (mut x_min, mut y_min, mut x_max, mut y_max) = (size, size, 0, 0);
    for y in 0..size {
        for x in 0..size {
            if mask[y * size + x] {
                x_min = x_min.min(x);
                y_min = y_min.min(y);
                x_max = x_max.max(x);
                y_max = y_max.max(y);
            }
        }
    }
    BBox::new(x_min, y_min, x_max, y_max)
}

fn rasterize(size: usize, label: usize, rng: &mut ChaCha8Rng) -> ShapeRaster {
    let s = size as f64;
    let area_lo = (MIN_AREA_FRAC * s * s).ceil();
    let area_hi = (MAX_AREA_FRAC * s * s).floor();
    let fit = size - 2; // one-pixel margin on every side
    let mut mask = vec![false; size * size];
    let mut set = |y: usize, x: usize| mask[y * size + x] = true;

    match label {
        0 => {
            // Circle: radius bounds from pi*r^2 with margin for
            // rasterization error.
            let r_lo = ((area_lo / std::f64::consts::PI).sqrt() * 1.10).ceil() as usize;
            let r_hi = (((area_hi / std::f64::consts::PI).sqrt()) / 1.03).floor() as usize;
            let r_hi = r_hi.min((fit - 1) / 2);
            let r = rng.gen_range(r_lo..=r_hi);
            let cy = rng.gen_range(1 + r..=size - 2 - r);
            let cx = rng.gen_range(1 + r..=size - 2 - r);
            let r2 = (r * r) as i64;
            for y in cy - r..=cy + r {
                for x in cx - r..=cx + r {
                    let dy = y as i64 - cy as i64;
                    let dx = x as i64 - cx as i64;
                    if dx * dx + dy * dy <= r2 {
                        set(y, x);
                    }
                }
            }
        }
        1 => {
            // Square: exact area side^2.
            let s_lo = area_lo.sqrt().ceil() as usize;
            let s_hi = (area_hi.sqrt().floor() as usize).min(fit);
            let side = rng.gen_range(s_lo..=s_hi);
            let y0 = rng.gen_range(1..=size - 1 - side);
            let x0 = rng.gen_range(1..=size - 1 - side);
            for y in y0..y0 + side {
                for x in x0..x0 + side {
                    set(y, x);
                }
            }
        }
        2 => {
            // Triangle: apex up, height 2a, base half-width a; area ~ 2a^2.
            let a_lo = (area_lo / 2.0).sqrt().ceil() as usize;
            let a_hi = ((area_hi / 2.2).sqrt().floor() as usize).min((fit - 1) / 2);
            let a = rng.gen_range(a_lo..=a_hi);
            let h = 2 * a;
            let y0 = rng.gen_range(1..=size - 2 - h);
            let cx = rng.gen_range(1 + a..=size - 2 - a);
            for dy in 0..=h {
                let half = a * dy / h;
                for x in cx - half..=cx + half {
                    set(y0 + dy, x);
                }
            }
        }
        _ => {
            // Cross: two centered bars of half-length l and half-thickness
            // t; area 2*(2l+1)*(2t+1) - (2t+1)^2.
            let l_lo = (area_lo / 1.6).sqrt().ceil() as usize;
            let l_hi = ((area_hi / 1.9).sqrt().floor() as usize).min((fit - 1) / 2);
            let l = rng.gen_range(l_lo..=l_hi);
            let t = (l / 4).max(3).min(l - 1);
            let cy = rng.gen_range(1 + l..=size - 2 - l);
            let cx = rng.gen_range(1 + l..=size - 2 - l);
            for y in cy - t..=cy + t {
                for x in cx - l..=cx + l {
                    set(y, x);
                }
            }
            for y in cy - l..=cy + l {
                for x in cx - t..=cx + t {
                    set(y, x);
                }
            }
        }
    }

    let bbox = raster_bbox(size, &mask);
    if cfg!(debug_assertions) {
        let area = mask.iter().filter(|m| **m).count() as f64;
        debug_assert!(
            area >= area_lo && area <= area_hi,
            "shape area {area} outside [{area_lo}, {area_hi}] for class {label}"
        );
    }
    ShapeRaster { mask, bbox }
}

/// Low-frequency per-channel brightness field: a coarse random grid
/// smoothly interpolated to full resolution.
fn lowfreq_field(size: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let grid = 8usize;
    let dist = Uniform::new_inclusive(-0.20f32, 0.20);
    let coarse = Tensor::<f32>::from_fn(&[grid, grid], |_| dist.sample(rng));
    bilinear_resize_2d(&coarse, size, size).into_data()
}

pub fn generate_one(seed: u64, index: u64, size: usize) -> Result<Sample> {
    let (sample, _) = generate_one_with_mask(seed, index, size)?;
    Ok(sample)
}

/// As [`generate_one`], also returning the rasterized shape mask (useful
/// for inspection and for verifying box tightness).
pub fn generate_one_with_mask(seed: u64, index: u64, size: usize) -> Result<(Sample, Vec<bool>)> {
    check_placeable(size)?;
    let mut rng = derive_rng(seed, streams::DATA, index);
    // Stratified class assignment keeps the histogram exactly uniform while
    // the mapping still varies with the seed.
    let label = ((index as usize) + (mix64(seed) as usize)) % NUM_CLASSES;

    let shape = rasterize(size, label, &mut rng);

    // Background: base color, smooth brightness field, speckle clutter.
    let base: [f32; 3] = [
        rng.gen_range(0.25..0.75),
        rng.gen_range(0.25..0.75),
        rng.gen_range(0.25..0.75),
    ];
    let fields: Vec<Vec<f32>> = (0..3).map(|_| lowfreq_field(size, &mut rng)).collect();
    let mut pixels = vec![0.0f32; 3 * size * size];
    for c in 0..3 {
        for i in 0..size * size {
            pixels[c * size * size + i] = base[c] + fields[c][i];
        }
    }
    let n_speckles = size * size / 136;
    for _ in 0..n_speckles {
        let y = rng.gen_range(0..size - 1);
        let x = rng.gen_range(0..size - 1);
        let color: [f32; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let (dy, dx) = match rng.gen_range(0..4u8) {
            0 => (1, 1),
            1 => (1, 2),
            2 => (2, 1),
            _ => (2, 2),
        };
        for yy in y..(y + dy).min(size) {
            for xx in x..(x + dx).min(size) {
                for c in 0..3 {
                    pixels[(c * size + yy) * size + xx] = color[c];
                }
            }
        }
    }

    // Shape fill: a color contrasting with the background base, shaded
    // left-to-right so one side is more discriminative than the other.
    let fill: [f32; 3] = loop {
        let candidate: [f32; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let contrast = candidate
            .iter()
            .zip(&base)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        if contrast >= 0.3 {
            break candidate;
        }
    };
    let bb = shape.bbox;
    let width = (bb.x_max - bb.x_min).max(1) as f32;
    for y in 0..size {
        for x in 0..size {
            if !shape.mask[y * size + x] {
                continue;
            }
            let shade = 0.7 + 0.6 * (x - bb.x_min) as f32 / width;
            let noise: f32 = rng.gen_range(-0.05..0.05);
            for c in 0..3 {
                pixels[(c * size + y) * size + x] = fill[c] * shade + noise;
            }
        }
    }
    for v in pixels.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }

    let image = Tensor::new(vec![3, size, size], pixels)?;
    Ok((
        Sample {
            image,
            label,
            gt_box: shape.bbox,
        },
        shape.mask,
    ))
}

/// Samples `start..start + n` of the deterministic stream.
pub fn generate_range(seed: u64, start: u64, n: usize, size: usize) -> Result<Vec<Sample>> {
    (0..n as u64)
        .map(|i| generate_one(seed, start + i, size))
        .collect()
}

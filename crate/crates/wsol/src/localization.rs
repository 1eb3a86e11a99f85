//! Mask-to-box extraction and the three localization metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Result, WsolError};

/// Axis-aligned box with inclusive pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BBox {
    pub fn new(x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> BBox {
        assert!(x_min <= x_max && y_min <= y_max, "degenerate box");
        BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    /// Pixel count, inclusive of both borders.
    pub fn area(&self) -> usize {
        (self.x_max - self.x_min + 1) * (self.y_max - self.y_min + 1)
    }
}

/// A thresholded foreground mask.
#[derive(Debug, Clone)]
pub struct BinaryMask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(h: usize, w: usize, data: Vec<bool>) -> BinaryMask {
        assert_eq!(data.len(), h * w);
        BinaryMask { h, w, data }
    }

    pub fn at(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }
}

/// Thresholds probabilities at `tau`; ties (`== tau`) count as foreground.
pub fn binarize(h: usize, w: usize, probs: &[f32], tau: f64) -> BinaryMask {
    assert_eq!(probs.len(), h * w);
    let data = probs.iter().map(|&p| p as f64 >= tau).collect();
    BinaryMask::new(h, w, data)
}

/// Tight box around the largest 4-connected foreground component; `None`
/// for an empty mask. Equal-area ties go to the component whose first pixel
/// appears earliest in row-major order.
pub fn extract_bbox(mask: &BinaryMask) -> Option<BBox> {
    let (h, w) = (mask.h, mask.w);
    let mut visited = vec![false; h * w];
    let mut best: Option<(usize, BBox)> = None;
    let mut queue: Vec<usize> = Vec::new();
    for start in 0..h * w {
        if !mask.data[start] || visited[start] {
            continue;
        }
        visited[start] = true;
        queue.clear();
        queue.push(start);
        let (mut x_min, mut x_max) = (start % w, start % w);
        let (mut y_min, mut y_max) = (start / w, start / w);
        let mut area = 0usize;
        while let Some(p) = queue.pop() {
            area += 1;
            let (y, x) = (p / w, p % w);
            x_min = x_min.min(x);
            x_max = x_max.max(x);
            y_min = y_min.min(y);
            y_max = y_max.max(y);
            let mut push = |q: usize| {
                if mask.data[q] && !visited[q] {
                    visited[q] = true;
                    queue.push(q);
                }
            };
            if x > 0 {
                push(p - 1);
            }
            if x + 1 < w {
                push(p + 1);
            }
            if y > 0 {
                push(p - w);
            }
            if y + 1 < h {
                push(p + w);
            }
        }
        let boxed = BBox::new(x_min, y_min, x_max, y_max);
        if best.as_ref().is_none_or(|(a, _)| area > *a) {
            best = Some((area, boxed));
        }
    }
    best.map(|(_, b)| b)
}

/// Intersection over union with inclusive pixel areas.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix_min = a.x_min.max(b.x_min);
    let ix_max = a.x_max.min(b.x_max);
    let iy_min = a.y_min.max(b.y_min);
    let iy_max = a.y_max.min(b.y_max);
    if ix_min > ix_max || iy_min > iy_max {
        return 0.0;
    }
    let inter = ((ix_max - ix_min + 1) * (iy_max - iy_min + 1)) as f64;
    let union = (a.area() + b.area()) as f64 - inter;
    inter / union
}

/// One evaluated image: the predicted box (if any), the classifier's class
/// ranking (best first, no duplicates), and the ground truth.
#[derive(Debug, Clone)]
pub struct EvalRecord {
    pub pred_box: Option<BBox>,
    pub class_ranks: Vec<usize>,
    pub gt_box: BBox,
    pub gt_class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub top1_loc: f64,
    pub top5_loc: f64,
    pub gt_known_loc: f64,
    pub n_images: usize,
}

/// Localization accuracy over a record set. A record localizes when its
/// predicted box has IoU strictly above 0.5 with the ground truth; missing
/// boxes never localize. Top-1/Top-5 additionally require the true class at
/// rank 1 / within the first five ranks.
pub fn evaluate(records: &[EvalRecord]) -> Result<Metrics> {
    if records.is_empty() {
        return Err(WsolError::EmptyRecords);
    }
    let mut top1 = 0usize;
    let mut top5 = 0usize;
    let mut gt_known = 0usize;
    for r in records {
        let localized = r
            .pred_box
            .map(|p| iou(&p, &r.gt_box) > 0.5)
            .unwrap_or(false);
        if !localized {
            continue;
        }
        gt_known += 1;
        if r.class_ranks.first() == Some(&r.gt_class) {
            top1 += 1;
        }
        if r.class_ranks.iter().take(5).any(|c| *c == r.gt_class) {
            top5 += 1;
        }
    }
    let n = records.len() as f64;
    Ok(Metrics {
        top1_loc: top1 as f64 / n,
        top5_loc: top5 as f64 / n,
        gt_known_loc: gt_known as f64 / n,
        n_images: records.len(),
    })
}

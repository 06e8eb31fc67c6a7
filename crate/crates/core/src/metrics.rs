//! Evaluation metrics and training losses.
//!
//! SSIM uses global image statistics (one mean/variance/covariance per image).
//! AP follows the COCO bounding-box protocol: greedy score-ordered matching at
//! IoU thresholds 0.50:0.05:0.95, 101-point interpolated precision, at most
//! 100 detections per image, and size classes by ground-truth area.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::codec::threshold_heatmap;
use crate::dataset::ImageDetections;
use crate::error::{Error, Result};
use crate::model::{BoundingBox, CellAnnotation, GrayImage, RgbImage};

fn check_dims(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch(format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

/// Global-statistics SSIM with `c1 = (0.01 L)²`, `c2 = (0.03 L)²`.
pub fn ssim(x1: &GrayImage, x2: &GrayImage, dynamic_range: f64) -> Result<f64> {
    check_dims(x1.dims(), x2.dims())?;
    if dynamic_range.is_nan() || dynamic_range <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "dynamic range {dynamic_range} must be positive"
        )));
    }
    let n = x1.data().len();
    if n == 0 {
        return Err(Error::InvalidParameter("SSIM of empty images".into()));
    }
    let nf = n as f64;
    let mu1 = x1.data().iter().map(|&v| v as f64).sum::<f64>() / nf;
    let mu2 = x2.data().iter().map(|&v| v as f64).sum::<f64>() / nf;
    let (mut var1, mut var2, mut cov) = (0.0, 0.0, 0.0);
    for (&a, &b) in x1.data().iter().zip(x2.data()) {
        let (da, db) = (a as f64 - mu1, b as f64 - mu2);
        var1 += da * da;
        var2 += db * db;
        cov += da * db;
    }
    let (var1, var2, cov) = (var1 / nf, var2 / nf, cov / nf);
    let c1 = (0.01 * dynamic_range).powi(2);
    let c2 = (0.03 * dynamic_range).powi(2);
    Ok(((2.0 * mu1 * mu2 + c1) * (2.0 * cov + c2))
        / ((mu1 * mu1 + mu2 * mu2 + c1) * (var1 + var2 + c2)))
}

/// Mean of the per-channel SSIM scores.
pub fn ssim_color(x1: &RgbImage, x2: &RgbImage, dynamic_range: f64) -> Result<f64> {
    check_dims(x1.dims(), x2.dims())?;
    let mut total = 0.0;
    for c in 0..3 {
        total += ssim(&x1.channel(c), &x2.channel(c), dynamic_range)?;
    }
    Ok(total / 3.0)
}

/// Two-class (background, centroid blob) mIoU of thresholded heatmaps. A
/// class absent from both inputs scores 1.
pub fn miou_heatmap(pred: &GrayImage, gt: &GrayImage, t: f32) -> Result<f64> {
    check_dims(pred.dims(), gt.dims())?;
    let p = threshold_heatmap(pred, t);
    let g = threshold_heatmap(gt, t);
    // counts[pred][gt]
    let mut counts = [[0usize; 2]; 2];
    for (&a, &b) in p.data.iter().zip(&g.data) {
        counts[a as usize][b as usize] += 1;
    }
    let iou = |class: usize| {
        let tp = counts[class][class];
        let fp = counts[class][1 - class];
        let fn_ = counts[1 - class][class];
        let denom = tp + fp + fn_;
        if denom == 0 {
            1.0
        } else {
            tp as f64 / denom as f64
        }
    };
    Ok((iou(0) + iou(1)) / 2.0)
}

/// Huber loss with unit threshold on `|y - y_hat|`.
pub fn huber(y: f64, y_hat: f64) -> f64 {
    let d = (y - y_hat).abs();
    if d <= 1.0 {
        0.5 * d * d
    } else {
        d - 0.5
    }
}

/// Pixelwise mean Huber loss between two maps.
pub fn mean_huber(pred: &GrayImage, target: &GrayImage) -> Result<f64> {
    check_dims(pred.dims(), target.dims())?;
    let n = pred.data().len().max(1) as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| huber(t as f64, p as f64))
        .sum::<f64>()
        / n)
}

pub fn total_loss(l_heatmap: f64, l_height: f64, l_width: f64) -> f64 {
    l_heatmap + 0.5 * l_height + 0.5 * l_width
}

pub const MAX_DETECTIONS_PER_IMAGE: usize = 100;
pub const RECALL_POINTS: usize = 101;
pub const SMALL_AREA: f64 = 32.0 * 32.0;
pub const LARGE_AREA: f64 = 96.0 * 96.0;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SizeClass {
    All,
    Small,
    Medium,
    Large,
}

impl SizeClass {
    pub fn contains(self, area: f64) -> bool {
        match self {
            SizeClass::All => true,
            SizeClass::Small => area < SMALL_AREA,
            SizeClass::Medium => (SMALL_AREA..LARGE_AREA).contains(&area),
            SizeClass::Large => area >= LARGE_AREA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTruths {
    pub image_id: i64,
    pub cells: Vec<CellAnnotation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
}

struct PreparedImage {
    truths: Vec<BoundingBox>,
    /// Sorted by descending score, truncated.
    detections: Vec<(f64, BoundingBox)>,
}

fn prepare(
    dets: &[ImageDetections],
    truths: &[ImageTruths],
) -> Result<BTreeMap<i64, PreparedImage>> {
    let mut images = BTreeMap::new();
    for (i, t) in truths.iter().enumerate() {
        for (j, c) in t.cells.iter().enumerate() {
            c.validate().map_err(|e| Error::InvalidRecord {
                position: format!("truths[{i}].cells[{j}]"),
                reason: e.to_string(),
            })?;
        }
        let prepared = PreparedImage {
            truths: t.cells.iter().map(CellAnnotation::to_box).collect(),
            detections: Vec::new(),
        };
        if images.insert(t.image_id, prepared).is_some() {
            return Err(Error::InvalidRecord {
                position: format!("truths[{i}]"),
                reason: format!("duplicate image id {}", t.image_id),
            });
        }
    }
    let mut seen = HashSet::new();
    for (i, set) in dets.iter().enumerate() {
        let bad = |reason: String| Error::InvalidRecord {
            position: format!("detections[{i}]"),
            reason,
        };
        if !seen.insert(set.image_id) {
            return Err(bad(format!("duplicate image id {}", set.image_id)));
        }
        let img = images.get_mut(&set.image_id).ok_or_else(|| {
            bad(format!(
                "image id {} has no ground-truth entry",
                set.image_id
            ))
        })?;
        for d in &set.detections {
            d.validate().map_err(|e| bad(e.to_string()))?;
        }
        let mut sorted: Vec<(f64, BoundingBox)> = set
            .detections
            .iter()
            .map(|d| (d.score, d.to_box()))
            .collect();
        // stable: equal scores keep input order
        sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
        sorted.truncate(MAX_DETECTIONS_PER_IMAGE);
        img.detections = sorted;
    }
    Ok(images)
}

/// Greedy matching of one image at one IoU threshold. Returns a TP flag per
/// detection (in the given order).
fn greedy_match(detections: &[&BoundingBox], truths: &[&BoundingBox], threshold: f64) -> Vec<bool> {
    let mut taken = vec![false; truths.len()];
    detections
        .iter()
        .map(|d| {
            let mut best = threshold.min(1.0 - 1e-10);
            let mut matched = None;
            for (g, t) in truths.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                let iou = d.iou(t);
                if iou < best {
                    continue;
                }
                best = iou;
                matched = Some(g);
            }
            if let Some(g) = matched {
                taken[g] = true;
            }
            matched.is_some()
        })
        .collect()
}

/// 101-point interpolated AP from score-ranked TP flags.
fn interpolated_ap(mut ranked: Vec<(f64, bool)>, positives: usize) -> f64 {
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n = ranked.len();
    let mut recall = Vec::with_capacity(n);
    let mut precision = Vec::with_capacity(n);
    let (mut tp, mut fp) = (0usize, 0usize);
    for &(_, hit) in &ranked {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / positives as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..n).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut total = 0.0;
    for k in 0..RECALL_POINTS {
        let r = k as f64 / (RECALL_POINTS - 1) as f64;
        let idx = recall.partition_point(|&rc| rc < r);
        if idx < n {
            total += precision[idx];
        }
    }
    total / RECALL_POINTS as f64
}

/// Truths and scored detections of one image restricted to a size class.
type ClassView<'a> = (Vec<&'a BoundingBox>, Vec<(f64, &'a BoundingBox)>);

/// Per-threshold AP for one size class; `None` when the class has no truths.
fn class_ap(images: &BTreeMap<i64, PreparedImage>, class: SizeClass) -> Option<[f64; 10]> {
    let filtered: Vec<ClassView<'_>> = images
        .values()
        .map(|img| {
            let truths = img
                .truths
                .iter()
                .filter(|b| class.contains(b.area()))
                .collect();
            let dets = img
                .detections
                .iter()
                .filter(|(_, b)| class.contains(b.area()))
                .map(|(s, b)| (*s, b))
                .collect();
            (truths, dets)
        })
        .collect();
    let positives: usize = filtered.iter().map(|(t, _)| t.len()).sum();
    if positives == 0 {
        return None;
    }
    Some(iou_thresholds().map(|thr| {
        let mut ranked = Vec::new();
        for (truths, dets) in &filtered {
            let boxes: Vec<&BoundingBox> = dets.iter().map(|(_, b)| *b).collect();
            let hits = greedy_match(&boxes, truths, thr);
            ranked.extend(dets.iter().zip(hits).map(|((s, _), hit)| (*s, hit)));
        }
        interpolated_ap(ranked, positives)
    }))
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn coco_ap(detections: &[ImageDetections], truths: &[ImageTruths]) -> Result<ApReport> {
    let images = prepare(detections, truths)?;
    let all = class_ap(&images, SizeClass::All).ok_or_else(|| {
        Error::InvalidParameter("AP requires at least one ground-truth box".into())
    })?;
    Ok(ApReport {
        ap: mean(&all),
        ap50: all[0],
        ap_small: class_ap(&images, SizeClass::Small).map(|v| mean(&v)),
        ap_medium: class_ap(&images, SizeClass::Medium).map(|v| mean(&v)),
        ap_large: class_ap(&images, SizeClass::Large).map(|v| mean(&v)),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMatchSummary {
    pub image_id: i64,
    pub truths: usize,
    pub detections: usize,
    pub true_positives: usize,
    pub precision: f64,
    pub recall: f64,
}

/// Per-image greedy matching counts at a single IoU threshold.
pub fn per_image_summary(
    detections: &[ImageDetections],
    truths: &[ImageTruths],
    iou_threshold: f64,
) -> Result<Vec<ImageMatchSummary>> {
    let images = prepare(detections, truths)?;
    Ok(images
        .iter()
        .map(|(&image_id, img)| {
            let boxes: Vec<&BoundingBox> = img.detections.iter().map(|(_, b)| b).collect();
            let truths: Vec<&BoundingBox> = img.truths.iter().collect();
            let tp = greedy_match(&boxes, &truths, iou_threshold)
                .iter()
                .filter(|&&h| h)
                .count();
            let ratio = |num: usize, den: usize| {
                if den == 0 {
                    1.0
                } else {
                    num as f64 / den as f64
                }
            };
            ImageMatchSummary {
                image_id,
                truths: truths.len(),
                detections: boxes.len(),
                true_positives: tp,
                precision: ratio(tp, boxes.len()),
                recall: ratio(tp, truths.len()),
            }
        })
        .collect())
}

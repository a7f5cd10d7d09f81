//! Rotated-box overlap and KITTI-style average precision.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::bbox::{Box3D, Dims};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("unknown overlap mode {0:?}")]
    UnknownMode(String),
    #[error("iou threshold {0} outside (0, 1]")]
    InvalidThreshold(f64),
}

/// Areas below this are treated as empty.
const SLIVER_AREA: f64 = 1e-12;

type Pt = (f64, f64);

fn cross(o: Pt, a: Pt, b: Pt) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

pub fn polygon_area(poly: &[Pt]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let twice: f64 = (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum();
    twice.abs() / 2.0
}

/// Intersection of two convex polygons, both counter-clockwise, by clipping
/// `subject` against every edge of `clip`.
pub fn convex_intersection(subject: &[Pt], clip: &[Pt]) -> Vec<Pt> {
    let mut out: Vec<Pt> = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % n]);
        let input = std::mem::take(&mut out);
        let m = input.len();
        for j in 0..m {
            let cur = input[j];
            let prev = input[(j + m - 1) % m];
            let c_in = cross(a, b, cur) >= 0.0;
            let p_in = cross(a, b, prev) >= 0.0;
            if c_in {
                if !p_in {
                    out.push(segment_line(prev, cur, a, b));
                }
                out.push(cur);
            } else if p_in {
                out.push(segment_line(prev, cur, a, b));
            }
        }
    }
    out
}

fn segment_line(p: Pt, q: Pt, a: Pt, b: Pt) -> Pt {
    let dp = cross(a, b, p);
    let dq = cross(a, b, q);
    let t = dp / (dp - dq);
    (p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1))
}

/// Footprint intersection area in the x-z plane.
pub fn bev_intersection(a: &Box3D, b: &Box3D) -> f64 {
    let area = polygon_area(&convex_intersection(&a.bev_corners(), &b.bev_corners()));
    if area < SLIVER_AREA {
        0.0
    } else {
        area
    }
}

pub fn bev_iou(a: &Box3D, b: &Box3D) -> f64 {
    let inter = bev_intersection(a, b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.dims.length * a.dims.width + b.dims.length * b.dims.width - inter;
    (inter / union).clamp(0.0, 1.0)
}

pub fn iou3d(a: &Box3D, b: &Box3D) -> f64 {
    let (a_top, a_bot) = a.y_range();
    let (b_top, b_bot) = b.y_range();
    let overlap_h = (a_bot.min(b_bot) - a_top.max(b_top)).max(0.0);
    let inter = bev_intersection(a, b) * overlap_h;
    if inter <= 0.0 {
        return 0.0;
    }
    (inter / (a.volume() + b.volume() - inter)).clamp(0.0, 1.0)
}

/// An overlap measure between two boxes in `[0, 1]`.
pub trait Overlap: Send + Sync {
    fn name(&self) -> &'static str;
    fn iou(&self, a: &Box3D, b: &Box3D) -> f64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BevOverlap;

impl Overlap for BevOverlap {
    fn name(&self) -> &'static str {
        "bev"
    }
    fn iou(&self, a: &Box3D, b: &Box3D) -> f64 {
        bev_iou(a, b)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct VolumeOverlap;

impl Overlap for VolumeOverlap {
    fn name(&self) -> &'static str {
        "3d"
    }
    fn iou(&self, a: &Box3D, b: &Box3D) -> f64 {
        iou3d(a, b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    /// Registered overlap name (`bev` or `3d`).
    pub mode: String,
    pub recall_points: usize,
    /// When set, only ground truth tagged with this bucket counts.
    pub bucket: Option<u8>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            mode: "bev".into(),
            recall_points: 40,
            bucket: None,
        }
    }
}

/// Cumulative true/false positive counts after each prediction, in
/// descending score order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PrCurve {
    pub tp: Vec<usize>,
    pub fp: Vec<usize>,
    pub num_gt: usize,
}

/// Greedy matching in descending score order. Each prediction takes the
/// unmatched ground truth of its frame with the highest overlap, counting as
/// a true positive when that overlap reaches the threshold. Predictions that
/// only match ground truth outside the selected bucket are ignored.
pub fn pr_curve(predictions: &[Box3D], ground_truth: &[Box3D], overlap: &dyn Overlap, threshold: f64, bucket: Option<u8>) -> PrCurve {
    let mut by_frame: BTreeMap<u32, Vec<(usize, bool)>> = BTreeMap::new();
    for (i, g) in ground_truth.iter().enumerate() {
        let counted = bucket.is_none_or(|b| g.bucket == Some(b));
        by_frame.entry(g.frame).or_default().push((i, counted));
    }
    let num_gt = by_frame.values().flatten().filter(|(_, c)| *c).count();
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&a, &b| predictions[b].score.total_cmp(&predictions[a].score));
    let mut matched = vec![false; ground_truth.len()];
    let mut curve = PrCurve {
        num_gt,
        ..Default::default()
    };
    let (mut tp, mut fp) = (0, 0);
    for pi in order {
        let p = &predictions[pi];
        let best = by_frame.get(&p.frame).and_then(|gts| {
            gts.iter()
                .filter(|(gi, _)| !matched[*gi])
                .map(|&(gi, counted)| (gi, counted, overlap.iou(p, &ground_truth[gi])))
                .filter(|(_, _, iou)| *iou >= threshold)
                .max_by(|a, b| a.2.total_cmp(&b.2).then(b.0.cmp(&a.0)))
        });
        match best {
            Some((gi, true, _)) => {
                matched[gi] = true;
                tp += 1;
            }
            Some((gi, false, _)) => {
                matched[gi] = true;
                continue;
            }
            None => fp += 1,
        }
        curve.tp.push(tp);
        curve.fp.push(fp);
    }
    curve
}

/// Interpolated AP sampled at `recall_points` equally spaced recall levels
/// `1/R, 2/R, ..., 1`.
pub fn ap_from_curve(curve: &PrCurve, recall_points: usize) -> f64 {
    if curve.num_gt == 0 || recall_points == 0 {
        return 0.0;
    }
    let n = curve.tp.len();
    // Max precision at or after each point.
    let mut best_after = vec![0.0f64; n + 1];
    for k in (0..n).rev() {
        let prec = curve.tp[k] as f64 / (curve.tp[k] + curve.fp[k]) as f64;
        best_after[k] = best_after[k + 1].max(prec);
    }
    let mut sum = 0.0;
    for r in 1..=recall_points {
        // First point with tp / num_gt >= r / R.
        if let Some(k) = (0..n).find(|&k| curve.tp[k] * recall_points >= r * curve.num_gt) {
            sum += best_after[k];
        }
    }
    sum / recall_points as f64
}

pub fn average_precision_with(predictions: &[Box3D], ground_truth: &[Box3D], overlap: &dyn Overlap, cfg: &EvalConfig) -> f64 {
    let curve = pr_curve(predictions, ground_truth, overlap, cfg.iou_threshold, cfg.bucket);
    ap_from_curve(&curve, cfg.recall_points)
}

pub fn overlap_by_name(name: &str) -> Result<Box<dyn Overlap>, EvalError> {
    crate::registry::Registry::default()
        .overlap(name)
        .ok_or_else(|| EvalError::UnknownMode(name.to_string()))
}

pub fn average_precision(predictions: &[Box3D], ground_truth: &[Box3D], cfg: &EvalConfig) -> Result<f64, EvalError> {
    if !(cfg.iou_threshold > 0.0 && cfg.iou_threshold <= 1.0) {
        return Err(EvalError::InvalidThreshold(cfg.iou_threshold));
    }
    let overlap = overlap_by_name(&cfg.mode)?;
    Ok(average_precision_with(predictions, ground_truth, overlap.as_ref(), cfg))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApEntry {
    pub mode: String,
    pub iou_threshold: f64,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub frames: usize,
    pub predictions: usize,
    pub ground_truth: usize,
    pub results: Vec<ApEntry>,
}

impl EvalReport {
    pub fn ap(&self, mode: &str, threshold: f64) -> Option<f64> {
        self.results
            .iter()
            .find(|e| e.mode == mode && (e.iou_threshold - threshold).abs() < 1e-12)
            .map(|e| e.ap)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "# {} | frames {} | predictions {} | ground truth {}", self.protocol, self.frames, self.predictions, self.ground_truth)?;
        for e in &self.results {
            writeln!(f, "AP_{}@{:.1} = {:.4}", e.mode.to_uppercase(), e.iou_threshold, e.ap)?;
        }
        Ok(())
    }
}

/// AP for both overlap modes at IoU 0.5 and 0.3.
pub fn standard_report(predictions: &[Box3D], ground_truth: &[Box3D], frames: usize, base: &EvalConfig) -> EvalReport {
    let mut results = Vec::new();
    for mode in ["bev", "3d"] {
        for thr in [0.5, 0.3] {
            let cfg = EvalConfig {
                mode: mode.into(),
                iou_threshold: thr,
                ..base.clone()
            };
            let ap = average_precision(predictions, ground_truth, &cfg).expect("built-in modes");
            results.push(ApEntry {
                mode: mode.into(),
                iou_threshold: thr,
                ap,
            });
        }
    }
    EvalReport {
        protocol: format!("interpolated AP, R{} recall sampling", base.recall_points),
        frames,
        predictions: predictions.len(),
        ground_truth: ground_truth.len(),
        results,
    }
}

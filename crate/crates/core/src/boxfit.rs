//! Bird's-eye-view box fitting.
//!
//! Parked vehicles get their yaw from an exhaustive angle search that scores
//! how tightly the projected points hug two perpendicular edges. Moving
//! vehicles take their yaw from the trajectory instead.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbox::Dims;
use crate::geometry::{wrap_angle, PointCloud};
use crate::stats::{mad, percentile_mut, percentile_pair, sigmoid};
use crate::tracker::InstanceTrack;

/// Minimum number of points for a BEV fit.
pub const MIN_FIT_POINTS: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum BoxFitError {
    #[error("criterion needs at least one point on each axis")]
    EmptyInput,
    #[error("projection lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("{0} points, box fitting needs at least {MIN_FIT_POINTS}")]
    TooFewPoints(usize),
    #[error("track has {0} entries, trajectory yaw needs at least 2")]
    TooShort(usize),
    #[error("reference frame {0} not in track")]
    MissingReference(u32),
    #[error("cannot estimate vertical extent of an empty cloud")]
    EmptyCloud,
    #[error("invalid box-fit config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoxFitConfig {
    /// Sigmoid steepness of the saturated criterion.
    pub alpha: f64,
    /// Yaw grid spacing in radians.
    pub angle_step: f64,
    pub percentile_low: f64,
    pub percentile_high: f64,
    /// Multiplier turning a percentile span into an edge-to-edge extent.
    pub extent_scale: f64,
    pub prior_dims: Dims,
    pub typical_max_dims: Dims,
    /// Fits smaller than this in any dimension are treated as unobserved.
    pub typical_min_dims: Dims,
    /// Radians.
    pub degenerate_view_tolerance: f64,
    /// Registered name of the yaw criterion.
    pub criterion: String,
}

impl Default for BoxFitConfig {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            angle_step: PI / 360.0,
            percentile_low: 0.10,
            percentile_high: 0.90,
            extent_scale: 1.0,
            prior_dims: Dims::new(3.89, 1.62, 1.53),
            typical_max_dims: Dims::new(6.5, 2.4, 2.5),
            typical_min_dims: Dims::new(2.5, 1.3, 1.0),
            degenerate_view_tolerance: 10f64.to_radians(),
            criterion: "saturated-closeness".into(),
        }
    }
}

impl BoxFitConfig {
    pub fn validate(&self) -> Result<(), BoxFitError> {
        let bad = |m: String| Err(BoxFitError::InvalidConfig(m));
        if !(self.alpha > 0.0) {
            return bad(format!("alpha {} must be > 0", self.alpha));
        }
        if !(self.angle_step > 0.0 && self.angle_step <= FRAC_PI_2) {
            return bad(format!("angle_step {} must be in (0, pi/2]", self.angle_step));
        }
        if !(0.0 <= self.percentile_low && self.percentile_low < self.percentile_high && self.percentile_high <= 1.0) {
            return bad("need 0 <= percentile_low < percentile_high <= 1".into());
        }
        if !(self.extent_scale > 0.0) {
            return bad("extent_scale must be > 0".into());
        }
        if !self.prior_dims.is_valid() || !self.typical_max_dims.is_valid() || !self.typical_min_dims.is_valid() {
            return bad("dimension priors must be > 0".into());
        }
        Ok(())
    }
}

/// Result of a BEV fit. `yaw` is the grid angle in `[0, pi/2)` of the first
/// axis; `dims` are the extents along that axis and across it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BevFit {
    pub yaw: f64,
    pub center: (f64, f64),
    pub dims: (f64, f64),
    pub criterion_value: f64,
}

impl BevFit {
    /// Yaw of the longer axis with `(length, width)`. The returned yaw is one
    /// of two heading hypotheses; its opposite is resolved later.
    pub fn long_axis(&self) -> (f64, f64, f64) {
        let (a, b) = self.dims;
        if a >= b {
            (self.yaw, a, b)
        } else {
            (wrap_angle(self.yaw + FRAC_PI_2), b, a)
        }
    }
}

/// Scores one candidate orientation from the projections of the points onto
/// its two axes. Lower is better.
pub trait YawCriterion: Send + Sync {
    fn name(&self) -> &'static str;
    fn evaluate(&self, proj_x: &[f64], proj_y: &[f64], scratch: &mut Vec<f64>) -> f64;
}

/// Distance of `v` to the nearer of two edge positions.
#[inline]
fn edge_distance(v: f64, lo: f64, hi: f64) -> f64 {
    (hi - v).abs().min((v - lo).abs())
}

/// Edge closeness with percentile edges and sigmoid saturation.
#[derive(Debug, Clone, Copy)]
pub struct SaturatedCloseness {
    pub alpha: f64,
    pub low: f64,
    pub high: f64,
}

impl YawCriterion for SaturatedCloseness {
    fn name(&self) -> &'static str {
        "saturated-closeness"
    }

    fn evaluate(&self, proj_x: &[f64], proj_y: &[f64], scratch: &mut Vec<f64>) -> f64 {
        let Some((x_lo, x_hi)) = percentile_pair(proj_x, self.low, self.high, scratch) else {
            return 0.0;
        };
        let Some((y_lo, y_hi)) = percentile_pair(proj_y, self.low, self.high, scratch) else {
            return 0.0;
        };
        proj_x
            .iter()
            .zip(proj_y)
            .map(|(&x, &y)| {
                let ex = sigmoid(self.alpha * edge_distance(x, x_lo, x_hi));
                let ey = sigmoid(self.alpha * edge_distance(y, y_lo, y_hi));
                ex.min(ey)
            })
            .sum()
    }
}

/// Plain closeness: raw distance to the extreme points, no saturation.
#[derive(Debug, Clone, Copy, Default)]
pub struct PlainCloseness;

impl YawCriterion for PlainCloseness {
    fn name(&self) -> &'static str {
        "closeness"
    }

    fn evaluate(&self, proj_x: &[f64], proj_y: &[f64], _scratch: &mut Vec<f64>) -> f64 {
        let bounds = |v: &[f64]| {
            v.iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
        };
        let (x_lo, x_hi) = bounds(proj_x);
        let (y_lo, y_hi) = bounds(proj_y);
        proj_x
            .iter()
            .zip(proj_y)
            .map(|(&x, &y)| edge_distance(x, x_lo, x_hi).min(edge_distance(y, y_lo, y_hi)))
            .sum()
    }
}

/// Saturated closeness of one set of axis projections with 10th/90th
/// percentile edges.
pub fn saturated_closeness(proj_x: &[f64], proj_y: &[f64], alpha: f64) -> Result<f64, BoxFitError> {
    if proj_x.len() != proj_y.len() {
        return Err(BoxFitError::LengthMismatch(proj_x.len(), proj_y.len()));
    }
    if proj_x.is_empty() {
        return Err(BoxFitError::EmptyInput);
    }
    let crit = SaturatedCloseness {
        alpha,
        low: 0.10,
        high: 0.90,
    };
    Ok(crit.evaluate(proj_x, proj_y, &mut Vec::new()))
}

fn bev(points: &PointCloud) -> (Vec<f64>, Vec<f64>) {
    points.points.iter().map(|p| (p.x, p.z)).unzip()
}

#[inline]
fn project_axes(xs: &[f64], zs: &[f64], theta: f64, px: &mut Vec<f64>, py: &mut Vec<f64>) {
    let (s, c) = theta.sin_cos();
    px.clear();
    py.clear();
    for (&x, &z) in xs.iter().zip(zs) {
        px.push(c * x + s * z);
        py.push(-s * x + c * z);
    }
}

/// Reads center and extents at a fixed axis angle from percentile spans.
fn extents_at(xs: &[f64], zs: &[f64], theta: f64, cfg: &BoxFitConfig, criterion_value: f64) -> BevFit {
    let (mut px, mut py) = (Vec::new(), Vec::new());
    project_axes(xs, zs, theta, &mut px, &mut py);
    let mut scratch = Vec::new();
    let (a_lo, a_hi) = percentile_pair(&px, cfg.percentile_low, cfg.percentile_high, &mut scratch).unwrap();
    let (b_lo, b_hi) = percentile_pair(&py, cfg.percentile_low, cfg.percentile_high, &mut scratch).unwrap();
    let (a_mid, b_mid) = ((a_lo + a_hi) / 2.0, (b_lo + b_hi) / 2.0);
    let (s, c) = theta.sin_cos();
    let floor = 1e-3;
    BevFit {
        yaw: theta,
        center: (c * a_mid - s * b_mid, s * a_mid + c * b_mid),
        dims: (
            ((a_hi - a_lo) * cfg.extent_scale).max(floor),
            ((b_hi - b_lo) * cfg.extent_scale).max(floor),
        ),
        criterion_value,
    }
}

/// Exhaustive yaw search over `[0, pi/2)` with the given criterion. Ties keep
/// the smallest angle.
pub fn fit_bev_box_with(points: &PointCloud, cfg: &BoxFitConfig, criterion: &dyn YawCriterion) -> Result<BevFit, BoxFitError> {
    if points.len() < MIN_FIT_POINTS {
        return Err(BoxFitError::TooFewPoints(points.len()));
    }
    let (xs, zs) = bev(points);
    let steps = (FRAC_PI_2 / cfg.angle_step - 1e-9).ceil().max(1.0) as usize;
    let (mut px, mut py, mut scratch) = (Vec::new(), Vec::new(), Vec::new());
    let mut best = (0.0, f64::INFINITY);
    for i in 0..steps {
        let theta = i as f64 * cfg.angle_step;
        project_axes(&xs, &zs, theta, &mut px, &mut py);
        let value = criterion.evaluate(&px, &py, &mut scratch);
        if value < best.1 {
            best = (theta, value);
        }
    }
    Ok(extents_at(&xs, &zs, best.0, cfg, best.1))
}

/// Saturated-closeness fit using `cfg.alpha` and the configured percentiles.
pub fn fit_bev_box(points: &PointCloud, cfg: &BoxFitConfig) -> Result<BevFit, BoxFitError> {
    let crit = SaturatedCloseness {
        alpha: cfg.alpha,
        low: cfg.percentile_low,
        high: cfg.percentile_high,
    };
    fit_bev_box_with(points, cfg, &crit)
}

/// Extents and center with the yaw held fixed (moving vehicles).
pub fn fit_fixed_yaw(points: &PointCloud, yaw: f64, cfg: &BoxFitConfig) -> Result<BevFit, BoxFitError> {
    if points.len() < MIN_FIT_POINTS {
        return Err(BoxFitError::TooFewPoints(points.len()));
    }
    let (xs, zs) = bev(points);
    Ok(extents_at(&xs, &zs, yaw, cfg, f64::NAN))
}

/// Circular median: ordinary median of the angles unwrapped around their
/// circular mean.
pub fn circular_median(angles: &[f64]) -> Option<f64> {
    if angles.is_empty() {
        return None;
    }
    let (s, c) = angles
        .iter()
        .fold((0.0, 0.0), |(s, c), a| (s + a.sin(), c + a.cos()));
    let center = if s == 0.0 && c == 0.0 { angles[0] } else { s.atan2(c) };
    let mut offsets: Vec<f64> = angles.iter().map(|a| wrap_angle(a - center)).collect();
    let med = percentile_mut(&mut offsets, 0.5)?;
    Some(wrap_angle(center + med))
}

/// Heading of a moving track at `reference_frame` from the directions
/// between adjacent locations within five entries either side.
pub fn moving_yaw(track: &InstanceTrack, reference_frame: u32) -> Result<f64, BoxFitError> {
    if track.entries.len() < 2 {
        return Err(BoxFitError::TooShort(track.entries.len()));
    }
    let r = track
        .entry_index(reference_frame)
        .ok_or(BoxFitError::MissingReference(reference_frame))?;
    let lo = r.saturating_sub(5);
    let hi = (r + 5).min(track.entries.len() - 1);
    let yaws: Vec<f64> = track.entries[lo..=hi]
        .windows(2)
        .map(|w| {
            let d = w[1].location - w[0].location;
            d.z.atan2(d.x)
        })
        .collect();
    circular_median(&yaws).ok_or(BoxFitError::TooShort(track.entries.len()))
}

/// True when the box is seen (nearly) along one of its axes, where one
/// dimension cannot be observed.
pub fn is_degenerate_view(yaw: f64, viewing_angle: f64, tolerance: f64) -> bool {
    let d = (yaw - viewing_angle).rem_euclid(FRAC_PI_2);
    d <= tolerance || FRAC_PI_2 - d <= tolerance
}

/// Replaces implausible or unobservable dimensions with the prior.
pub fn sanitize_dims(length: f64, width: f64, height: f64, yaw: f64, viewing_angle: f64, cfg: &BoxFitConfig) -> Dims {
    let (max, min) = (cfg.typical_max_dims, cfg.typical_min_dims);
    if length > max.length || width > max.width || height > max.height {
        return cfg.prior_dims;
    }
    if length < min.length || width < min.width || height < min.height {
        return cfg.prior_dims;
    }
    if is_degenerate_view(yaw, viewing_angle, cfg.degenerate_view_tolerance) {
        return cfg.prior_dims;
    }
    Dims::new(length, width, height)
}

/// Heading and sanitized dimensions of a stationary fit.
///
/// Normally the longer fitted axis is the length. In a degenerate view only
/// the face across the line of sight is measurable; it is taken as the
/// length or the width face depending on which prior dimension its extent
/// is closer to, and the prior dimensions are used.
pub fn stationary_box(fit: &BevFit, height: f64, viewing_angle: f64, cfg: &BoxFitConfig) -> (f64, Dims) {
    let (yaw, length, width) = fit.long_axis();
    if !is_degenerate_view(yaw, viewing_angle, cfg.degenerate_view_tolerance) {
        return (yaw, sanitize_dims(length, width, height, yaw, viewing_angle, cfg));
    }
    let axes = [(fit.yaw, fit.dims.0), (fit.yaw + FRAC_PI_2, fit.dims.1)];
    let across = |a: f64| (a - viewing_angle).sin().abs();
    let (face_yaw, extent) = if across(axes[0].0) >= across(axes[1].0) { axes[0] } else { axes[1] };
    let prior = cfg.prior_dims;
    let yaw = if (extent - prior.width).abs() < (extent - prior.length).abs() {
        face_yaw + FRAC_PI_2
    } else {
        face_yaw
    };
    (wrap_angle(yaw), prior)
}

/// Viewing angle of a location in the x-z plane.
pub fn viewing_angle(x: f64, z: f64) -> f64 {
    z.atan2(x)
}

/// Vertical center and height from robust percentiles of `-y`.
///
/// Points further than 3.5 scaled MADs from the median height are dropped
/// first. The ground contact is the extrapolated lower edge of the
/// percentile span.
pub fn estimate_vertical(points: &PointCloud) -> Result<(f64, f64), BoxFitError> {
    if points.is_empty() {
        return Err(BoxFitError::EmptyCloud);
    }
    let ys: Vec<f64> = points.points.iter().map(|p| p.y).collect();
    let (med, dev) = mad(&ys).expect("nonempty");
    let limit = 3.5 * 1.4826 * dev;
    let mut kept: Vec<f64> = if limit > 0.0 {
        ys.iter().copied().filter(|y| (y - med).abs() <= limit).collect()
    } else {
        ys.clone()
    };
    if kept.is_empty() {
        kept = ys;
    }
    let p_top = percentile_mut(&mut kept, 0.10).unwrap();
    let p_bottom = percentile_mut(&mut kept, 0.90).unwrap();
    let span = p_bottom - p_top;
    let height = (span / 0.8).clamp(0.5, 3.0);
    let bottom = p_bottom + 0.125 * span;
    Ok((bottom - height / 2.0, height))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;

    #[test]
    fn points_on_upper_edge_score_half() {
        let xs = vec![2.0; 20];
        let ys: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let loss = saturated_closeness(&xs, &ys, 10.0).unwrap();
        assert!(loss <= 0.5 * 20.0 + 1e-12);
    }

    #[test]
    fn empty_and_mismatched_inputs() {
        assert_eq!(saturated_closeness(&[], &[], 10.0), Err(BoxFitError::EmptyInput));
        assert_eq!(saturated_closeness(&[1.0], &[], 10.0), Err(BoxFitError::LengthMismatch(1, 0)));
    }

    #[test]
    fn outlier_contribution_is_bounded() {
        let mut xs: Vec<f64> = (0..50).map(|i| (i % 2) as f64).collect();
        let mut ys: Vec<f64> = (0..50).map(|i| (i % 5) as f64).collect();
        let base = saturated_closeness(&xs, &ys, 10.0).unwrap();
        xs.push(1e6);
        ys.push(-1e6);
        let with = saturated_closeness(&xs, &ys, 10.0).unwrap();
        assert!(with - base <= 1.0 + 1e-9, "outlier added {}", with - base);
    }

    #[test]
    fn fixed_yaw_on_too_few_points() {
        let pc = PointCloud::from_points(vec![Vec3::new(0.0, 0.0, 1.0); 3]);
        assert_eq!(fit_fixed_yaw(&pc, 0.0, &BoxFitConfig::default()), Err(BoxFitError::TooFewPoints(3)));
        assert_eq!(fit_bev_box(&pc, &BoxFitConfig::default()), Err(BoxFitError::TooFewPoints(3)));
    }

    #[test]
    fn sanitize_rules() {
        let cfg = BoxFitConfig::default();
        assert_eq!(sanitize_dims(9.4, 1.7, 1.5, 0.3, 1.0, &cfg), cfg.prior_dims);
        // Viewed straight from behind: car at (0, 10) heading +z.
        let view = viewing_angle(0.0, 10.0);
        assert_eq!(sanitize_dims(4.1, 1.7, 1.5, FRAC_PI_2, view, &cfg), cfg.prior_dims);
        let oblique = view + 40f64.to_radians();
        assert_eq!(sanitize_dims(4.1, 1.7, 1.5, oblique, view, &cfg), Dims::new(4.1, 1.7, 1.5));
    }

    #[test]
    fn circular_median_across_wrap() {
        let m = circular_median(&[PI - 0.1, -PI + 0.1, PI - 0.05]).unwrap();
        assert!((wrap_angle(m - (PI - 0.05))).abs() < 1e-12);
    }

    #[test]
    fn vertical_single_point_clamps() {
        let pc = PointCloud::from_points(vec![Vec3::new(0.0, 1.0, 5.0)]);
        let (_, h) = estimate_vertical(&pc).unwrap();
        assert_eq!(h, 0.5);
        assert_eq!(estimate_vertical(&PointCloud::default()), Err(BoxFitError::EmptyCloud));
    }
}

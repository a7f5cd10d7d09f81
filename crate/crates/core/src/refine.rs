//! Template-based position refinement and front/back disambiguation.
//!
//! A generic two-box vehicle (body plus cabin, cabin slightly rearward) is
//! surface-sampled and posed at candidate positions. The fit score of a pose
//! is the mean saturated distance from every observed point to its nearest
//! template point, so far outliers contribute a bounded amount.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbox::{Box3D, Dims};
use crate::geometry::{rotation_about_y, wrap_angle, PointCloud, Vec3};
use crate::stats::sigmoid;

#[derive(Debug, Error, PartialEq)]
pub enum RefineError {
    #[error("template fitting needs at least one observed point")]
    EmptyCloud,
    #[error("template dimensions must be > 0")]
    InvalidDims,
    #[error("invalid refine config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    /// Meters, applied along camera x and z.
    pub max_shift: f64,
    pub grid_step: f64,
    pub tfl_alpha: f64,
    /// Observed points used per evaluation (evenly strided).
    pub max_points: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            max_shift: 2.0,
            grid_step: 0.1,
            tfl_alpha: 10.0,
            max_points: 128,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<(), RefineError> {
        if !(self.max_shift > 0.0 && self.grid_step > 0.0 && self.tfl_alpha > 0.0) {
            return Err(RefineError::InvalidConfig(
                "max_shift, grid_step and tfl_alpha must be > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Body height as a fraction of total height.
pub const BODY_HEIGHT: f64 = 0.6;
/// Cabin size relative to the body footprint.
pub const CABIN_LENGTH: f64 = 0.55;
pub const CABIN_WIDTH: f64 = 0.9;
/// Rearward offset of the cabin center, fraction of length.
pub const CABIN_OFFSET: f64 = 0.05;

/// Axis-aligned part of the vehicle silhouette in local coordinates
/// (length along +x, width along +z, up along -y, ground at y = 0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Part {
    pub min: Vec3,
    pub max: Vec3,
}

/// Body and (optionally) cabin boxes for the given dimensions.
pub fn silhouette_parts(dims: Dims, with_cabin: bool) -> Vec<Part> {
    let (l, w, h) = (dims.length, dims.width, dims.height);
    let mut parts = vec![Part {
        min: Vec3::new(-l / 2.0, -BODY_HEIGHT * h, -w / 2.0),
        max: Vec3::new(l / 2.0, 0.0, w / 2.0),
    }];
    if with_cabin {
        let cx = -CABIN_OFFSET * l;
        let (cl, cw) = (CABIN_LENGTH * l, CABIN_WIDTH * w);
        parts.push(Part {
            min: Vec3::new(cx - cl / 2.0, -h, -cw / 2.0),
            max: Vec3::new(cx + cl / 2.0, -BODY_HEIGHT * h, cw / 2.0),
        });
    }
    parts
}

/// Evenly spaced sample positions `lo + step * i`, `i < n`, along one axis.
#[derive(Debug, Clone, Copy, PartialEq)]
struct AxisSamples {
    axis: usize,
    lo: f64,
    step: f64,
    inv_step: f64,
    n: usize,
}

impl AxisSamples {
    fn new(axis: usize, lo: f64, hi: f64, spacing: f64) -> Self {
        let n = (((hi - lo) / spacing).ceil() as usize + 1).max(2);
        let step = (hi - lo) / (n - 1) as f64;
        Self {
            axis,
            lo,
            step,
            inv_step: 1.0 / step,
            n,
        }
    }

    #[inline]
    fn coord(&self, i: usize) -> f64 {
        self.lo + self.step * i as f64
    }

    /// Squared distance from `q` to the closest sample position. The two
    /// positions bracketing `q` are compared, so rounding in the index
    /// estimate cannot pick a farther sample.
    #[inline]
    fn nearest_sq(&self, q: f64) -> f64 {
        let t = (q - self.lo) * self.inv_step;
        let i = if t > 0.0 { (t as usize).min(self.n - 2) } else { 0 };
        let d0 = q - self.coord(i);
        let d1 = q - self.coord(i + 1);
        (d0 * d0).min(d1 * d1)
    }
}

/// Regular grid of samples on one axis-aligned rectangle.
#[derive(Debug, Clone, Copy, PartialEq)]
struct FaceLattice {
    fixed_axis: usize,
    fixed: f64,
    a: AxisSamples,
    b: AxisSamples,
}

impl FaceLattice {
    fn new(fixed_axis: usize, fixed: f64, (a, a_lo, a_hi): (usize, f64, f64), (b, b_lo, b_hi): (usize, f64, f64), spacing: f64) -> Self {
        Self {
            fixed_axis,
            fixed,
            a: AxisSamples::new(a, a_lo, a_hi, spacing),
            b: AxisSamples::new(b, b_lo, b_hi, spacing),
        }
    }

    fn len(&self) -> usize {
        self.a.n * self.b.n
    }

    fn push_points(&self, out: &mut Vec<Vec3>) {
        for i in 0..self.a.n {
            for j in 0..self.b.n {
                let mut p = Vec3::zeros();
                p[self.fixed_axis] = self.fixed;
                p[self.a.axis] = self.a.coord(i);
                p[self.b.axis] = self.b.coord(j);
                out.push(p);
            }
        }
    }

    /// Exact squared distance to the nearest lattice sample. The squared
    /// distance separates per axis, so each in-plane axis is minimized on
    /// its own; terms are summed in x, y, z order.
    #[inline]
    fn nearest_sq(&self, q: &Vec3, bound: f64) -> f64 {
        let df = q[self.fixed_axis] - self.fixed;
        let df = df * df;
        if df >= bound {
            return f64::INFINITY;
        }
        let mut d = [0.0; 3];
        d[self.fixed_axis] = df;
        d[self.a.axis] = self.a.nearest_sq(q[self.a.axis]);
        d[self.b.axis] = self.b.nearest_sq(q[self.b.axis]);
        d[0] + d[1] + d[2]
    }
}

/// Visible faces of the silhouette as sample lattices. The body has no
/// underside and its top is split around the cabin footprint; the cabin
/// has no bottom face.
fn face_lattices(parts: &[Part], spacing: f64) -> Vec<FaceLattice> {
    let mut out = Vec::new();
    let cabin = parts.get(1).copied();
    for (pi, part) in parts.iter().enumerate() {
        let (mn, mx) = (part.min, part.max);
        for axis in 0..3 {
            let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
            for (side, fixed) in [mn[axis], mx[axis]].into_iter().enumerate() {
                if axis == 1 && side == 1 {
                    continue;
                }
                match (pi, axis, cabin) {
                    (0, 1, Some(c)) => {
                        // Body top: a = z, b = x.
                        let rects = [
                            ((mn.z, mx.z), (mn.x, c.min.x)),
                            ((mn.z, mx.z), (c.max.x, mx.x)),
                            ((mn.z, c.min.z), (c.min.x, c.max.x)),
                            ((c.max.z, mx.z), (c.min.x, c.max.x)),
                        ];
                        for ((z0, z1), (x0, x1)) in rects {
                            if z1 > z0 && x1 > x0 {
                                out.push(FaceLattice::new(1, fixed, (2, z0, z1), (0, x0, x1), spacing));
                            }
                        }
                    }
                    _ => out.push(FaceLattice::new(axis, fixed, (a, mn[a], mx[a]), (b, mn[b], mx[b]), spacing)),
                }
            }
        }
    }
    out
}

fn area(parts: &[Part]) -> f64 {
    parts
        .iter()
        .map(|p| {
            let d = p.max - p.min;
            2.0 * (d.x * d.y + d.y * d.z + d.z * d.x)
        })
        .sum()
}

/// Surface samples of a vehicle silhouette with exact nearest-sample
/// queries.
#[derive(Debug, Clone, PartialEq)]
pub struct VehicleTemplate {
    pub dims: Dims,
    pub points: PointCloud,
    faces: Vec<FaceLattice>,
}

/// Minimum number of template samples.
pub const TEMPLATE_SAMPLES: usize = 2000;

impl VehicleTemplate {
    fn build(dims: Dims, with_cabin: bool) -> Result<Self, RefineError> {
        if !dims.is_valid() {
            return Err(RefineError::InvalidDims);
        }
        let parts = silhouette_parts(dims, with_cabin);
        let mut spacing = (area(&parts) / (1.3 * TEMPLATE_SAMPLES as f64)).sqrt();
        let mut faces = face_lattices(&parts, spacing);
        while faces.iter().map(FaceLattice::len).sum::<usize>() < TEMPLATE_SAMPLES {
            spacing *= 0.85;
            faces = face_lattices(&parts, spacing);
        }
        let mut pts = Vec::new();
        for f in &faces {
            f.push_points(&mut pts);
        }
        Ok(Self {
            dims,
            points: PointCloud::from_points(pts),
            faces,
        })
    }

    /// Squared distance from a point in template coordinates to the nearest
    /// template sample. Exact: equal to a brute-force scan of `points`.
    #[inline]
    pub fn nearest_sq(&self, q: &Vec3) -> f64 {
        let mut best = f64::INFINITY;
        for f in &self.faces {
            best = best.min(f.nearest_sq(q, best));
        }
        best
    }

    /// Template points placed at a pose: ground contact at `y_bottom`.
    pub fn posed_points(&self, x: f64, y_bottom: f64, z: f64, yaw: f64) -> Vec<Vec3> {
        let r = rotation_about_y(yaw);
        let t = Vec3::new(x, y_bottom, z);
        self.points.points.iter().map(|p| r * p + t).collect()
    }
}

/// Surface-sampled two-box vehicle scaled to `dims`.
pub fn make_template(dims: Dims) -> Result<VehicleTemplate, RefineError> {
    VehicleTemplate::build(dims, true)
}

/// Body-only (front/back symmetric) template.
pub fn make_symmetric_template(dims: Dims) -> Result<VehicleTemplate, RefineError> {
    VehicleTemplate::build(dims, false)
}

/// Pose of a template in camera coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemplatePose {
    pub x: f64,
    pub z: f64,
    pub yaw: f64,
    /// Ground contact height (camera y of the box bottom).
    pub y_bottom: f64,
}

impl TemplatePose {
    pub fn of_box(b: &Box3D) -> Self {
        Self {
            x: b.center.x,
            z: b.center.z,
            yaw: b.yaw,
            y_bottom: b.center.y + b.dims.height / 2.0,
        }
    }
}

/// Mean of `sigmoid(alpha * d) - 0.5` over observed points, where `d` is the
/// distance to the nearest posed template point. Zero for a perfect fit,
/// always below 0.5.
pub fn template_fitting_loss(observed: &PointCloud, template: &VehicleTemplate, pose: &TemplatePose, alpha: f64) -> Result<f64, RefineError> {
    if observed.is_empty() {
        return Err(RefineError::EmptyCloud);
    }
    let local = to_template_frame(&observed.points, pose);
    Ok(loss_of(&local, template, Vec3::zeros(), alpha))
}

fn to_template_frame(points: &[Vec3], pose: &TemplatePose) -> Vec<Vec3> {
    let rt = rotation_about_y(pose.yaw).transpose();
    let t = Vec3::new(pose.x, pose.y_bottom, pose.z);
    points.iter().map(|p| rt * (p - t)).collect()
}

#[inline]
fn loss_of(local: &[Vec3], template: &VehicleTemplate, shift: Vec3, alpha: f64) -> f64 {
    let total: f64 = local
        .iter()
        .map(|q| sigmoid(alpha * template.nearest_sq(&(q - shift)).sqrt()) - 0.5)
        .sum();
    total / local.len() as f64
}

/// Prepared grid search: observed points in the template frame of the
/// initial pose, and the camera-frame shift directions in that frame.
struct ShiftSearch<'a> {
    local: Vec<Vec3>,
    rt: nalgebra::Matrix3<f64>,
    template: &'a VehicleTemplate,
    step: f64,
    alpha: f64,
    /// Offsets run over `-k..=k` grid steps on both axes.
    k: i64,
}

impl<'a> ShiftSearch<'a> {
    fn new(bx: &Box3D, observed: &PointCloud, template: &'a VehicleTemplate, cfg: &RefineConfig) -> Result<Self, RefineError> {
        if observed.is_empty() {
            return Err(RefineError::EmptyCloud);
        }
        let sample = observed.subsample(cfg.max_points);
        let pose = TemplatePose::of_box(bx);
        Ok(Self {
            local: to_template_frame(&sample.points, &pose),
            rt: rotation_about_y(pose.yaw).transpose(),
            template,
            step: cfg.grid_step,
            alpha: cfg.tfl_alpha,
            k: (cfg.max_shift / cfg.grid_step + 1e-9).floor() as i64,
        })
    }

    fn shift(&self, dx: f64, dz: f64) -> Vec3 {
        self.rt * Vec3::new(dx, 0.0, dz)
    }

    fn loss(&self, i: i64, j: i64) -> f64 {
        let shift = self.shift(i as f64 * self.step, j as f64 * self.step);
        loss_of(&self.local, self.template, shift, self.alpha)
    }

    /// Nearest-sample distances of all points at the shift `(dx, dz)`.
    fn distances(&self, dx: f64, dz: f64) -> Vec<f64> {
        let shift = self.shift(dx, dz);
        self.local.iter().map(|q| self.template.nearest_sq(&(q - shift)).sqrt()).collect()
    }

    /// Lower bound of the loss at any shift within `radius` of the shift
    /// where `distances` were measured: nearest-sample distance is
    /// 1-Lipschitz in the query position and the per-point term is
    /// increasing in distance.
    fn lower_bound(&self, distances: &[f64], radius: f64) -> f64 {
        let total: f64 = distances
            .iter()
            .map(|d| sigmoid(self.alpha * (d - radius).max(0.0)) - 0.5)
            .sum();
        total / distances.len() as f64
    }

    fn finish(bx: &Box3D, best: (i64, i64, f64), step: f64) -> (Box3D, f64) {
        let mut out = bx.clone();
        out.center.x += best.0 as f64 * step;
        out.center.z += best.1 as f64 * step;
        (out, best.2)
    }
}

/// Offsets per side of the square blocks bounded together.
const SEARCH_BLOCK: i64 = 5;

/// Radius covering an offset `(di, dj)` grid steps away, padded so rounding
/// never makes a bound exceed the true loss.
fn cover_radius(step: f64, di: f64, dj: f64) -> f64 {
    step * (di * di + dj * dj).sqrt() * (1.0 + 1e-9) + 1e-12
}

/// Best-first branch-and-bound over the offset grid of every search. Blocks
/// and single offsets share one queue ordered by loss lower bound; offsets
/// are bounded from their block center when the block is expanded. Returns `(search, i, j, loss)`
/// of the minimum; ties prefer the lowest search index, then the smallest
/// x offset, then the smallest z offset.
fn block_search(searches: &[ShiftSearch]) -> (usize, i64, i64, f64) {
    let k = searches[0].k;
    let step = searches[0].step;
    let ranges: Vec<(i64, i64)> = (-k..=k)
        .step_by(SEARCH_BLOCK as usize)
        .map(|lo| (lo, (lo + SEARCH_BLOCK - 1).min(k)))
        .collect();
    let mut blocks = Vec::with_capacity(searches.len() * ranges.len() * ranges.len());
    let mut queue = BinaryHeap::new();
    for (h, search) in searches.iter().enumerate() {
        for &(i0, i1) in &ranges {
            for &(j0, j1) in &ranges {
                let (ci, cj) = ((i0 + i1) as f64 / 2.0, (j0 + j1) as f64 / 2.0);
                let distances = search.distances(ci * step, cj * step);
                let radius = cover_radius(step, (i1 - i0) as f64 / 2.0, (j1 - j0) as f64 / 2.0);
                let bound = search.lower_bound(&distances, radius);
                queue.push(Candidate { bound, item: Item::Block(blocks.len()) });
                blocks.push((h, (i0, i1), (j0, j1), distances));
            }
        }
    }

    let mut best = (0usize, 0i64, 0i64, f64::INFINITY);
    while let Some(Candidate { bound, item }) = queue.pop() {
        if bound > best.3 + 1e-12 {
            break;
        }
        match item {
            Item::Block(b) => {
                let (h, (i0, i1), (j0, j1), ref distances) = blocks[b];
                let (ci, cj) = ((i0 + i1) as f64 / 2.0, (j0 + j1) as f64 / 2.0);
                for i in i0..=i1 {
                    for j in j0..=j1 {
                        let radius = cover_radius(step, i as f64 - ci, j as f64 - cj);
                        let bound = searches[h].lower_bound(distances, radius);
                        queue.push(Candidate { bound, item: Item::Cell(h, i, j) });
                    }
                }
            }
            Item::Cell(h, i, j) => {
                let loss = searches[h].loss(i, j);
                if loss < best.3 || (loss == best.3 && (h, i, j) < (best.0, best.1, best.2)) {
                    best = (h, i, j, loss);
                }
            }
        }
    }
    best
}

enum Item {
    Block(usize),
    Cell(usize, i64, i64),
}

/// Queue entry ordered so the smallest bound pops first.
struct Candidate {
    bound: f64,
    item: Item,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        other.bound.total_cmp(&self.bound)
    }
}

/// Grid search over x/z offsets of the box center with yaw fixed.
/// Returns the refined box and its loss. Ties keep the smallest x offset,
/// then the smallest z offset.
///
/// Offsets whose loss lower bound exceeds the best loss found so far are
/// skipped; the result is identical to evaluating every offset
/// ([`refine_position_exhaustive`]).
pub fn refine_position_with(bx: &Box3D, observed: &PointCloud, template: &VehicleTemplate, cfg: &RefineConfig) -> Result<(Box3D, f64), RefineError> {
    let search = ShiftSearch::new(bx, observed, template, cfg)?;
    let (_, i, j, loss) = block_search(std::slice::from_ref(&search));
    Ok(ShiftSearch::finish(bx, (i, j, loss), search.step))
}

/// Position grid search run for both heading hypotheses `yaw` and
/// `yaw + pi` together; returns the overall argmin. Ties prefer `yaw`, then
/// the smallest x offset, then the smallest z offset.
pub fn refine_pose_with(bx: &Box3D, observed: &PointCloud, template: &VehicleTemplate, cfg: &RefineConfig) -> Result<(Box3D, f64), RefineError> {
    let mut flipped = bx.clone();
    flipped.yaw = wrap_angle(bx.yaw + PI);
    let searches = [
        ShiftSearch::new(bx, observed, template, cfg)?,
        ShiftSearch::new(&flipped, observed, template, cfg)?,
    ];
    let (h, i, j, loss) = block_search(&searches);
    let base = if h == 0 { bx } else { &flipped };
    Ok(ShiftSearch::finish(base, (i, j, loss), searches[0].step))
}

/// Evaluates every grid offset; reference for [`refine_position_with`].
pub fn refine_position_exhaustive(bx: &Box3D, observed: &PointCloud, template: &VehicleTemplate, cfg: &RefineConfig) -> Result<(Box3D, f64), RefineError> {
    let search = ShiftSearch::new(bx, observed, template, cfg)?;
    let mut best = (0i64, 0i64, f64::INFINITY);
    for i in -search.k..=search.k {
        for j in -search.k..=search.k {
            let loss = search.loss(i, j);
            if loss < best.2 {
                best = (i, j, loss);
            }
        }
    }
    Ok(ShiftSearch::finish(bx, best, search.step))
}

pub fn refine_position(bx: &Box3D, observed: &PointCloud, cfg: &RefineConfig) -> Result<(Box3D, f64), RefineError> {
    let template = make_template(bx.dims)?;
    refine_position_with(bx, observed, &template, cfg)
}

/// Picks between `yaw` and `yaw + pi` by template loss (ties keep `yaw`).
/// When a trajectory heading is known it overrides the template whenever
/// the two disagree by more than a quarter turn.
pub fn resolve_heading_with(bx: &Box3D, observed: &PointCloud, template: &VehicleTemplate, cfg: &RefineConfig, trajectory_yaw: Option<f64>) -> Result<Box3D, RefineError> {
    if observed.is_empty() {
        return Err(RefineError::EmptyCloud);
    }
    let sample = observed.subsample(cfg.max_points);
    let pose = TemplatePose::of_box(bx);
    let flipped = TemplatePose {
        yaw: pose.yaw + PI,
        ..pose
    };
    let keep = template_fitting_loss(&sample, template, &pose, cfg.tfl_alpha)?;
    let flip = template_fitting_loss(&sample, template, &flipped, cfg.tfl_alpha)?;
    let mut yaw = if flip < keep - 1e-12 { bx.yaw + PI } else { bx.yaw };
    if let Some(traj) = trajectory_yaw {
        if wrap_angle(yaw - traj).abs() > PI / 2.0 {
            yaw += PI;
        }
    }
    let mut out = bx.clone();
    out.yaw = wrap_angle(yaw);
    Ok(out)
}

pub fn resolve_heading(bx: &Box3D, observed: &PointCloud, cfg: &RefineConfig, trajectory_yaw: Option<f64>) -> Result<Box3D, RefineError> {
    let template = make_template(bx.dims)?;
    resolve_heading_with(bx, observed, &template, cfg, trajectory_yaw)
}

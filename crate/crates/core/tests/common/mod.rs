//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

use autolabel_core::bbox::{Box3D, Dims};
use autolabel_core::geometry::{PointCloud, Vec3};
use autolabel_core::refine::Part;
use autolabel_core::tracker::{InstanceTrack, MotionClass, TrackEntry};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gauss(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    sigma * rng.sample::<f64, _>(StandardNormal)
}

pub fn random_box(rng: &mut ChaCha8Rng) -> Box3D {
    let dims = Dims::new(rng.gen_range(0.5..5.0), rng.gen_range(0.5..3.0), rng.gen_range(0.5..2.5));
    let c = Vec3::new(rng.gen_range(-20.0..20.0), rng.gen_range(-2.0..2.0), rng.gen_range(1.0..60.0));
    Box3D::new(c, dims, rng.gen_range(-PI..PI))
}

/// A second box near `a` so that overlaps cover the whole range.
pub fn nearby_box(rng: &mut ChaCha8Rng, a: &Box3D) -> Box3D {
    let mut b = random_box(rng);
    b.center = a.center + Vec3::new(rng.gen_range(-2.5..2.5), rng.gen_range(-1.0..1.0), rng.gen_range(-2.5..2.5));
    b
}

/// Point-in-box test through the box's own axes: length along the heading
/// in x-z, width across it, height along y.
pub fn inside(b: &Box3D, p: &Vec3, bev: bool) -> bool {
    let d = p - b.center;
    let (c, s) = (b.yaw.cos(), b.yaw.sin());
    let along = d.x * c + d.z * s;
    let across = -d.x * s + d.z * c;
    along.abs() <= b.dims.length / 2.0 && across.abs() <= b.dims.width / 2.0 && (bev || d.y.abs() <= b.dims.height / 2.0)
}

fn bounds(b: &Box3D) -> (Vec3, Vec3) {
    let r = 0.5 * (b.dims.length.hypot(b.dims.width));
    let h = b.dims.height / 2.0;
    (b.center - Vec3::new(r, h, r), b.center + Vec3::new(r, h, r))
}

/// IoU by uniform sampling of the joint bounding region.
pub fn monte_carlo_iou(a: &Box3D, b: &Box3D, samples: usize, bev: bool, rng: &mut ChaCha8Rng) -> f64 {
    let (alo, ahi) = bounds(a);
    let (blo, bhi) = bounds(b);
    let lo = alo.inf(&blo);
    let hi = ahi.sup(&bhi);
    let (mut na, mut nb, mut nab) = (0usize, 0usize, 0usize);
    for _ in 0..samples {
        let p = Vec3::new(
            rng.gen_range(lo.x..hi.x),
            if bev { 0.0 } else { rng.gen_range(lo.y..hi.y) },
            rng.gen_range(lo.z..hi.z),
        );
        let (ia, ib) = (inside(a, &p, bev), inside(b, &p, bev));
        na += ia as usize;
        nb += ib as usize;
        nab += (ia && ib) as usize;
    }
    let union = na + nb - nab;
    if union == 0 {
        0.0
    } else {
        nab as f64 / union as f64
    }
}

/// Interpolated AP by enumerating every score cut-off: each prefix of the
/// score-sorted predictions is matched from scratch, then the precision
/// envelope is read at `recall_points` recall levels.
pub fn enumerated_ap(preds: &[Box3D], gts: &[Box3D], iou: impl Fn(&Box3D, &Box3D) -> f64, threshold: f64, recall_points: usize) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
    let mut points = Vec::new();
    for k in 1..=order.len() {
        let mut used = vec![false; gts.len()];
        let mut tp = 0;
        for &pi in &order[..k] {
            let p = &preds[pi];
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gts.iter().enumerate() {
                if used[gi] || g.frame != p.frame {
                    continue;
                }
                let o = iou(p, g);
                if o >= threshold && best.is_none_or(|(_, bo)| o > bo) {
                    best = Some((gi, o));
                }
            }
            if let Some((gi, _)) = best {
                used[gi] = true;
                tp += 1;
            }
        }
        points.push((tp as f64 / gts.len() as f64, tp as f64 / k as f64, tp));
    }
    let mut sum = 0.0;
    for r in 1..=recall_points {
        let best = points
            .iter()
            .filter(|(_, _, tp)| tp * recall_points >= r * gts.len())
            .map(|(_, p, _)| *p)
            .fold(0.0f64, f64::max);
        sum += best;
    }
    sum / recall_points as f64
}

/// Points on the outline of an oriented rectangle with Gaussian jitter plus
/// a fraction of uniform outliers in a disc around it.
pub fn rectangle_outline(rng: &mut ChaCha8Rng, dims: (f64, f64), yaw: f64, n: usize, jitter: f64, outlier_fraction: f64, disc: f64) -> PointCloud {
    let (l, w) = dims;
    let (c, s) = (yaw.cos(), yaw.sin());
    let perimeter = 2.0 * (l + w);
    let mut pts = Vec::with_capacity(n);
    for _ in 0..n {
        if rng.gen::<f64>() < outlier_fraction {
            let r = disc * rng.gen::<f64>().sqrt();
            let a = rng.gen_range(-PI..PI);
            pts.push(Vec3::new(r * a.cos(), 0.0, r * a.sin()));
            continue;
        }
        let t = rng.gen_range(0.0..perimeter);
        let (a, b) = if t < l {
            (t - l / 2.0, -w / 2.0)
        } else if t < l + w {
            (l / 2.0, t - l - w / 2.0)
        } else if t < 2.0 * l + w {
            (t - l - w - l / 2.0, w / 2.0)
        } else {
            (-l / 2.0, t - 2.0 * l - w - w / 2.0)
        };
        let (a, b) = (a + gauss(rng, jitter), b + gauss(rng, jitter));
        pts.push(Vec3::new(a * c - b * s, 0.0, a * s + b * c));
    }
    PointCloud::from_points(pts)
}

/// Track whose entries sit at the given locations, one point each.
pub fn track_from_locations(locs: &[Vec3]) -> InstanceTrack {
    InstanceTrack {
        id: 0,
        entries: locs
            .iter()
            .enumerate()
            .map(|(i, l)| TrackEntry {
                frame: i as u32,
                location: *l,
                points: PointCloud::from_points(vec![*l]),
                confidence: 0.9,
                instance_id: 1,
                bbox2d: [0.0; 4],
                point_count: 1,
            })
            .collect(),
        motion: MotionClass::Unset,
    }
}

/// Distance from `p` to the surface of an axis-aligned part, and whether
/// `p` lies strictly inside it.
pub fn part_surface_distance(part: &Part, p: &Vec3) -> (f64, bool) {
    let mut outside = 0.0f64;
    let mut inner = f64::INFINITY;
    for k in 0..3 {
        let below = part.min[k] - p[k];
        let above = p[k] - part.max[k];
        let gap = below.max(above);
        if gap > 0.0 {
            outside += gap * gap;
        } else {
            inner = inner.min(-gap);
        }
    }
    if outside > 0.0 {
        (outside.sqrt(), false)
    } else {
        (inner, inner > 0.0)
    }
}

/// Nearest ray parameter where `origin + t dir` enters a part, found by
/// intersecting each face plane and checking the face rectangle.
pub fn ray_part_hit(origin: &Vec3, dir: &Vec3, part: &Part) -> Option<f64> {
    let mut best: Option<f64> = None;
    for k in 0..3 {
        if dir[k] == 0.0 {
            continue;
        }
        for plane in [part.min[k], part.max[k]] {
            let t = (plane - origin[k]) / dir[k];
            if t <= 0.0 {
                continue;
            }
            let q = origin + dir * t;
            let on_face = (0..3).filter(|&j| j != k).all(|j| q[j] >= part.min[j] - 1e-9 && q[j] <= part.max[j] + 1e-9);
            if on_face && best.is_none_or(|b| t < b) {
                best = Some(t);
            }
        }
    }
    best
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

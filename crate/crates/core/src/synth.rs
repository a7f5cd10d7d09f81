//! Synthetic scenes with known ground truth.
//!
//! Cars are the same two-box silhouette the refinement template uses, placed
//! on a flat ground plane. Every pixel ray is intersected analytically with
//! all boxes and the ground; the nearest hit gives depth and instance id.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbox::{Box3D, Dims};
use crate::geometry::{project, rotation_about_y, wrap_angle, CameraIntrinsics, EgoPose, Vec3};
use crate::io::{frame_file_name, write_labels, write_sequence, DepthMap, Frame, InstanceMaskFrame, IoError, Sequence};
use crate::refine::{silhouette_parts, Part};

/// Capture rate used for all kinematics.
pub const FRAME_RATE_HZ: f64 = 10.0;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene spec field `{field}`: {reason}")]
    InvalidSpec { field: String, reason: String },
    #[error("scene spec parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] IoError),
}

fn invalid(field: &str, reason: impl Into<String>) -> SynthError {
    SynthError::InvalidSpec {
        field: field.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EgoSpec {
    /// World `(x, z)` waypoints of the camera path.
    pub waypoints: Vec<[f64; 2]>,
    /// Meters per second along the path.
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CarSpec {
    pub dims: Dims,
    /// World `(x, z)` of the footprint center at t = 0.
    pub position: [f64; 2],
    /// World heading at t = 0, radians (direction `(cos, sin)` in x-z).
    pub yaw: f64,
    /// Forward speed in m/s.
    #[serde(default)]
    pub speed: f64,
    /// Heading rate in rad/s.
    #[serde(default)]
    pub yaw_rate: f64,
}

/// Static axis-aligned box that hides cars but is never an instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OccluderSpec {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub frames: u32,
    pub width: u32,
    pub height: u32,
    pub intrinsics: CameraIntrinsics,
    /// Camera height above the ground plane, meters.
    #[serde(default = "default_camera_height")]
    pub camera_height: f64,
    pub ego: EgoSpec,
    #[serde(default)]
    pub cars: Vec<CarSpec>,
    #[serde(default)]
    pub occluders: Vec<OccluderSpec>,
    /// Gaussian depth noise on instance pixels, meters.
    #[serde(default)]
    pub depth_noise: f64,
    /// Fraction of instance pixels whose depth is rescaled by U(0.5, 1.5).
    #[serde(default)]
    pub outlier_fraction: f64,
    /// Visible pixels needed for a car to appear in the ground truth.
    #[serde(default = "default_min_visible")]
    pub min_visible_pixels: usize,
}

fn default_camera_height() -> f64 {
    1.65
}

fn default_min_visible() -> usize {
    10
}

impl SceneSpec {
    pub fn from_json(text: &str) -> Result<Self, SynthError> {
        let spec: SceneSpec = serde_json::from_str(text).map_err(|e| SynthError::Parse(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.frames < 1 {
            return Err(invalid("frames", "must be >= 1"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(invalid("width", "image size must be nonzero"));
        }
        self.intrinsics
            .validate()
            .map_err(|e| invalid("intrinsics", e.to_string()))?;
        if !(self.camera_height > 0.0) {
            return Err(invalid("camera_height", "must be > 0"));
        }
        if self.ego.waypoints.is_empty() {
            return Err(invalid("ego.waypoints", "need at least one waypoint"));
        }
        if !(self.ego.speed >= 0.0) {
            return Err(invalid("ego.speed", "must be >= 0"));
        }
        if !(self.depth_noise >= 0.0 && self.depth_noise.is_finite()) {
            return Err(invalid("depth_noise", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) {
            return Err(invalid("outlier_fraction", "must be in [0, 1]"));
        }
        if self.cars.len() >= u16::MAX as usize {
            return Err(invalid("cars", "too many cars"));
        }
        for (i, c) in self.cars.iter().enumerate() {
            if !c.dims.is_valid() {
                return Err(invalid(&format!("cars[{i}].dims"), "must be > 0"));
            }
        }
        for (i, o) in self.occluders.iter().enumerate() {
            if (0..3).any(|k| !(o.max[k] > o.min[k])) {
                return Err(invalid(&format!("occluders[{i}]"), "max must exceed min on every axis"));
            }
        }
        Ok(())
    }

    /// Camera pose at a frame. The camera looks along its direction of
    /// travel (world +z for a stationary ego).
    pub fn ego_pose(&self, frame: u32) -> EgoPose {
        let t = frame as f64 / FRAME_RATE_HZ;
        let wp = &self.ego.waypoints;
        let mut remaining = self.ego.speed * t;
        let mut pos = wp[0];
        let mut dir = [0.0, 1.0];
        for seg in wp.windows(2) {
            let d = [seg[1][0] - seg[0][0], seg[1][1] - seg[0][1]];
            let len = (d[0] * d[0] + d[1] * d[1]).sqrt();
            if len == 0.0 {
                continue;
            }
            dir = [d[0] / len, d[1] / len];
            if remaining <= len {
                pos = [seg[0][0] + dir[0] * remaining, seg[0][1] + dir[1] * remaining];
                break;
            }
            remaining -= len;
            pos = seg[1];
        }
        let heading = (-dir[0]).atan2(dir[1]);
        EgoPose::from_heading(heading, Vec3::new(pos[0], 0.0, pos[1]), frame)
    }

    /// World footprint center and heading of a car at a frame.
    pub fn car_state(&self, car: &CarSpec, frame: u32) -> (f64, f64, f64) {
        let t = frame as f64 / FRAME_RATE_HZ;
        let yaw = car.yaw + car.yaw_rate * t;
        let (x, z) = if car.yaw_rate.abs() < 1e-12 {
            (
                car.position[0] + car.speed * t * car.yaw.cos(),
                car.position[1] + car.speed * t * car.yaw.sin(),
            )
        } else {
            let r = car.speed / car.yaw_rate;
            (
                car.position[0] + r * (yaw.sin() - car.yaw.sin()),
                car.position[1] - r * (yaw.cos() - car.yaw.cos()),
            )
        };
        (x, z, yaw)
    }

    /// Ground-truth box of a car in the camera frame of `frame`.
    pub fn car_box(&self, car_index: usize, frame: u32) -> Box3D {
        let car = &self.cars[car_index];
        let pose = self.ego_pose(frame);
        let (x, z, yaw) = self.car_state(car, frame);
        let center_world = Vec3::new(x, self.camera_height - car.dims.height / 2.0, z);
        let heading = (pose.rotation()[(2, 0)]).atan2(pose.rotation()[(0, 0)]);
        Box3D::new(pose.from_world(&center_world), car.dims, wrap_angle(yaw - heading)).with_frame(frame)
    }
}

/// A rendered sequence and its per-frame ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneBundle {
    pub sequence: Sequence,
    /// Visible cars per frame; `Box3D::bucket` is unused.
    pub ground_truth: Vec<Vec<Box3D>>,
    /// Instance id (car index + 1) of every ground-truth box.
    pub ground_truth_ids: Vec<Vec<u16>>,
    /// Noiseless depth of every frame (before noise/outliers).
    pub clean_depth: Vec<DepthMap>,
}

/// Ray-box slab test; returns the entry distance along the ray when
/// positive.
#[inline]
fn ray_aabb(origin: &Vec3, dir: &Vec3, part: &Part) -> Option<f64> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for k in 0..3 {
        if dir[k].abs() < 1e-15 {
            if origin[k] < part.min[k] || origin[k] > part.max[k] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[k];
        let (mut t0, mut t1) = ((part.min[k] - origin[k]) * inv, (part.max[k] - origin[k]) * inv);
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        t_near = t_near.max(t0);
        t_far = t_far.min(t1);
        if t_near > t_far {
            return None;
        }
    }
    (t_near > 0.0).then_some(t_near)
}

/// An object prepared for ray casting in one frame.
struct Placed {
    id: u16,
    parts: Vec<Part>,
    /// Camera-to-local rotation and camera origin in local coordinates.
    rot: Matrix3<f64>,
    origin: Vec3,
    /// Pixel rectangle `[u0, v0, u1, v1]` (inclusive) that can contain hits.
    rect: [u32; 4],
}

fn pixel_rect(corners_cam: &[Vec3], k: &CameraIntrinsics, width: u32, height: u32) -> Option<[u32; 4]> {
    let full = [0, 0, width - 1, height - 1];
    if corners_cam.iter().all(|c| c.z <= 0.0) {
        return None;
    }
    if corners_cam.iter().any(|c| c.z <= 0.05) {
        return Some(full);
    }
    let (mut u0, mut v0, mut u1, mut v1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for c in corners_cam {
        let (u, v) = project(c, k).ok()?;
        u0 = u0.min(u);
        v0 = v0.min(v);
        u1 = u1.max(u);
        v1 = v1.max(v);
    }
    if u1 < 0.0 || v1 < 0.0 || u0 > (width - 1) as f64 || v0 > (height - 1) as f64 {
        return None;
    }
    let clamp_u = |x: f64| x.clamp(0.0, (width - 1) as f64) as u32;
    let clamp_v = |x: f64| x.clamp(0.0, (height - 1) as f64) as u32;
    Some([clamp_u(u0.floor()), clamp_v(v0.floor()), clamp_u(u1.ceil()), clamp_v(v1.ceil())])
}

fn place(id: u16, parts: Vec<Part>, local_to_world_rot: Matrix3<f64>, local_origin_world: Vec3, cam: &EgoPose, spec: &SceneSpec) -> Option<Placed> {
    let rot = local_to_world_rot.transpose() * cam.rotation();
    let origin = local_to_world_rot.transpose() * (cam.translation() - local_origin_world);
    let mut corners = Vec::with_capacity(8 * parts.len());
    for p in &parts {
        for m in 0..8 {
            let c = Vec3::new(
                if m & 1 == 0 { p.min.x } else { p.max.x },
                if m & 2 == 0 { p.min.y } else { p.max.y },
                if m & 4 == 0 { p.min.z } else { p.max.z },
            );
            corners.push(cam.from_world(&(local_to_world_rot * c + local_origin_world)));
        }
    }
    let rect = pixel_rect(&corners, &spec.intrinsics, spec.width, spec.height)?;
    Some(Placed {
        id,
        parts,
        rot,
        origin,
        rect,
    })
}

/// Renders one frame: noiseless depth, noisy depth and id image.
fn render_frame(spec: &SceneSpec, frame: u32) -> (Vec<f32>, Vec<f32>, Vec<u16>) {
    let cam = spec.ego_pose(frame);
    let k = spec.intrinsics;
    let mut objects = Vec::new();
    for (i, car) in spec.cars.iter().enumerate() {
        let (x, z, yaw) = spec.car_state(car, frame);
        let parts = silhouette_parts(car.dims, true);
        if let Some(p) = place(i as u16 + 1, parts, rotation_about_y(yaw), Vec3::new(x, spec.camera_height, z), &cam, spec) {
            objects.push(p);
        }
    }
    for o in &spec.occluders {
        let part = Part {
            min: Vec3::from(o.min),
            max: Vec3::from(o.max),
        };
        if let Some(p) = place(0, vec![part], Matrix3::identity(), Vec3::zeros(), &cam, spec) {
            objects.push(p);
        }
    }

    let (w, h) = (spec.width, spec.height);
    let n = (w * h) as usize;
    let mut clean = vec![0.0f32; n];
    let mut ids = vec![0u16; n];
    let world_rot = cam.rotation();
    for v in 0..h {
        let row_objects: Vec<&Placed> = objects.iter().filter(|o| v >= o.rect[1] && v <= o.rect[3]).collect();
        for u in 0..w {
            let dir = Vec3::new((u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0);
            // Ground: world y = camera_height.
            let dir_world_y = (world_rot * dir).y;
            let mut best = if dir_world_y > 1e-12 {
                (spec.camera_height - cam.translation().y) / dir_world_y
            } else {
                f64::INFINITY
            };
            let mut best_id = 0u16;
            for o in &row_objects {
                if u < o.rect[0] || u > o.rect[2] {
                    continue;
                }
                let d = o.rot * dir;
                for part in &o.parts {
                    if let Some(t) = ray_aabb(&o.origin, &d, part) {
                        if t < best {
                            best = t;
                            best_id = o.id;
                        }
                    }
                }
            }
            let idx = (v * w + u) as usize;
            if best.is_finite() {
                // Ray parameter equals camera z because dir.z == 1.
                clean[idx] = best as f32;
                ids[idx] = best_id;
            }
        }
    }

    let mut noisy = clean.clone();
    if spec.depth_noise > 0.0 || spec.outlier_fraction > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(frame as u64);
        for idx in 0..n {
            if ids[idx] == 0 {
                continue;
            }
            rng.set_word_pos(idx as u128 * 64);
            let d = clean[idx] as f64;
            let noise: f64 = rng.sample(StandardNormal);
            let mut out = d + spec.depth_noise * noise;
            if rng.gen::<f64>() < spec.outlier_fraction {
                out = d * rng.gen_range(0.5..1.5);
            }
            noisy[idx] = out.max(0.01) as f32;
        }
    }
    (clean, noisy, ids)
}

fn detector_confidence(spec: &SceneSpec, frame: u32, id: u16, pixels: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5bd1_e995);
    rng.set_stream(frame as u64);
    rng.set_word_pos(id as u128 * 16);
    let jitter: f64 = rng.gen_range(-0.05..0.05);
    (0.55 + 0.4 * (pixels as f64 / 4000.0).min(1.0) + jitter).clamp(0.0, 1.0)
}

/// Renders every frame of the scene. Deterministic for a given spec.
pub fn generate_scene(spec: &SceneSpec) -> Result<SceneBundle, SynthError> {
    spec.validate()?;
    let mut frames = Vec::with_capacity(spec.frames as usize);
    let mut ground_truth = Vec::with_capacity(spec.frames as usize);
    let mut ground_truth_ids = Vec::with_capacity(spec.frames as usize);
    let mut clean_depth = Vec::with_capacity(spec.frames as usize);
    for f in 0..spec.frames {
        let (clean, noisy, ids) = render_frame(spec, f);
        let mut counts: BTreeMap<u16, usize> = BTreeMap::new();
        for &id in ids.iter().filter(|&&id| id != 0) {
            *counts.entry(id).or_default() += 1;
        }
        let confidences: BTreeMap<u16, f64> = counts
            .iter()
            .map(|(&id, &c)| (id, detector_confidence(spec, f, id, c)))
            .collect();
        let mask = InstanceMaskFrame::new(spec.width, spec.height, ids, &confidences)?;
        let mut gt = Vec::new();
        let mut gt_ids = Vec::new();
        for (&id, &count) in &counts {
            if count >= spec.min_visible_pixels {
                gt.push(spec.car_box(id as usize - 1, f));
                gt_ids.push(id);
            }
        }
        frames.push(Frame {
            index: f,
            depth: DepthMap::new(spec.width, spec.height, noisy)?,
            mask,
            intrinsics: spec.intrinsics,
            pose: spec.ego_pose(f),
        });
        clean_depth.push(DepthMap::new(spec.width, spec.height, clean)?);
        ground_truth.push(gt);
        ground_truth_ids.push(gt_ids);
    }
    Ok(SceneBundle {
        sequence: Sequence { frames },
        ground_truth,
        ground_truth_ids,
        clean_depth,
    })
}

/// Writes the sequence in the standard layout plus `label/` ground truth.
pub fn write_bundle(bundle: &SceneBundle, dir: impl AsRef<Path>) -> Result<(), SynthError> {
    let root = dir.as_ref();
    write_sequence(&bundle.sequence, root)?;
    let label_dir = root.join("label");
    std::fs::create_dir_all(&label_dir).map_err(|source| IoError::Io {
        path: label_dir.clone(),
        source,
    })?;
    for (frame, (gt, ids)) in bundle
        .sequence
        .frames
        .iter()
        .zip(bundle.ground_truth.iter().zip(&bundle.ground_truth_ids))
    {
        let labels: Vec<_> = gt
            .iter()
            .zip(ids)
            .map(|(b, id)| {
                let bbox = frame
                    .mask
                    .instance(*id)
                    .map(|i| [i.bbox[0] as f64, i.bbox[1] as f64, i.bbox[2] as f64, i.bbox[3] as f64])
                    .unwrap_or([0.0; 4]);
                b.to_label("Car", bbox)
            })
            .collect();
        write_labels(&labels, label_dir.join(frame_file_name(frame.index, "txt")))?;
    }
    Ok(())
}

/// Desk-scale defaults: 1242x375 image, focal 750.
pub fn default_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics {
        fx: 750.0,
        fy: 750.0,
        cx: 621.0,
        cy: 187.5,
    }
}

/// Random scene of parked cars seen from an ego driving straight along +z
/// at `ego_speed`. Cars are 5 to 25 m from the camera and fully inside the
/// image at the middle frame, at least 5 m apart, with random headings.
pub fn parked_scene(seed: u64, frames: u32, cars: usize, ego_speed: f64, depth_noise: f64, outlier_fraction: f64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let travel = ego_speed * frames.saturating_sub(1) as f64 / FRAME_RATE_HZ;
    let mut spec = SceneSpec {
        seed,
        frames,
        width: 1242,
        height: 375,
        intrinsics: default_intrinsics(),
        camera_height: 1.65,
        ego: EgoSpec {
            waypoints: vec![[0.0, 0.0], [0.0, travel + 1.0]],
            speed: ego_speed,
        },
        cars: Vec::new(),
        occluders: Vec::new(),
        depth_noise,
        outlier_fraction,
        min_visible_pixels: 10,
    };
    let mid = frames / 2;
    let mid_z = spec.ego_pose(mid).translation().z;
    let mut attempts = 0;
    while spec.cars.len() < cars && attempts < 10_000 {
        attempts += 1;
        let dims = Dims::new(rng.gen_range(3.6..4.3), rng.gen_range(1.55..1.8), rng.gen_range(1.4..1.6));
        let dist = rng.gen_range(5.0..25.0);
        let bearing: f64 = rng.gen_range(-0.6..0.6);
        let car = CarSpec {
            dims,
            position: [dist * bearing.sin(), mid_z + dist * bearing.cos()],
            yaw: rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
            speed: 0.0,
            yaw_rate: 0.0,
        };
        let clear = spec.cars.iter().all(|o| {
            let d = ((o.position[0] - car.position[0]).powi(2) + (o.position[1] - car.position[1]).powi(2)).sqrt();
            d > 5.0
        });
        if clear && fully_in_view(&spec, &car, mid) {
            spec.cars.push(car);
        }
    }
    spec
}

/// True when all box corners project at least two pixels inside the image.
fn fully_in_view(spec: &SceneSpec, car: &CarSpec, frame: u32) -> bool {
    let probe = SceneSpec {
        cars: vec![car.clone()],
        ..spec.clone()
    };
    let b = probe.car_box(0, frame);
    if b.center.z < 3.0 {
        return false;
    }
    let (c, s) = b.heading();
    let (hl, hw, hh) = (b.dims.length / 2.0, b.dims.width / 2.0, b.dims.height / 2.0);
    [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)].iter().all(|&(a, w)| {
        [-hh, hh].iter().all(|&dy| {
            let p = Vec3::new(b.center.x + a * hl * c - w * hw * s, b.center.y + dy, b.center.z + a * hl * s + w * hw * c);
            match project(&p, &spec.intrinsics) {
                Ok((u, v)) => u >= 2.0 && v >= 2.0 && u <= spec.width as f64 - 3.0 && v <= spec.height as f64 - 3.0,
                Err(_) => false,
            }
        })
    })
}

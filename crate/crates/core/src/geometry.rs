//! Pinhole lifting/projection and rigid transforms between frames.
//!
//! Camera axes follow the KITTI convention: x right, y down, z forward.
//! Integer pixel coordinates address pixel centers.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{DepthMap, InstanceMaskFrame};

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("point has non-positive depth z = {0}")]
    NonPositiveDepth(f64),
    #[error("instance id {0} not present in mask")]
    UnknownInstanceId(u16),
    #[error("point cloud carries no pixel-of-origin data")]
    MissingPixelOrigin,
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
}

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    if (-PI..PI).contains(&a) {
        return a;
    }
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    // rem_euclid can round up to exactly 2*pi.
    if w >= PI {
        w - 2.0 * PI
    } else {
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx.is_finite() && self.fx > 0.0 && self.fy.is_finite() && self.fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be > 0 (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics("principal point not finite".into()));
        }
        Ok(())
    }

    /// Single focal length: geometric mean of `fx` and `fy`.
    pub fn focal(&self) -> f64 {
        (self.fx * self.fy).sqrt()
    }

    #[inline]
    pub fn lift(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        Vec3::new(depth * (u - self.cx) / self.fx, depth * (v - self.cy) / self.fy, depth)
    }
}

/// Camera-to-world rigid transform of one frame: `p_world = R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EgoPose {
    rotation: Matrix3<f64>,
    translation: Vec3,
    frame: u32,
}

impl EgoPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vec3, frame: u32) -> Result<Self, GeometryError> {
        if rotation.iter().chain(translation.iter()).any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidPose("non-finite entry".into()));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > 1e-9 {
            return Err(GeometryError::InvalidPose(format!("det(R) = {det}")));
        }
        let ortho = (rotation * rotation.transpose() - Matrix3::identity()).abs().max();
        if ortho > 1e-9 {
            return Err(GeometryError::InvalidPose(format!("R R^T deviates from I by {ortho:e}")));
        }
        Ok(Self {
            rotation,
            translation,
            frame,
        })
    }

    pub fn identity(frame: u32) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
            frame,
        }
    }

    /// Pose rotated by `heading` about the camera y axis; heading 0 looks
    /// along world +z.
    pub fn from_heading(heading: f64, translation: Vec3, frame: u32) -> Self {
        Self {
            rotation: rotation_about_y(heading),
            translation,
            frame,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn frame(&self) -> u32 {
        self.frame
    }

    #[inline]
    pub fn to_world(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn from_world(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.translation)
    }
}

/// Rotation about the y axis mapping local +x to `(cos a, 0, sin a)`.
pub fn rotation_about_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, -s, 0.0, 1.0, 0.0, s, 0.0, c)
}

/// A set of 3D points with optional per-point provenance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    /// Pixel `(u, v)` each point was lifted from.
    pub pixels: Option<Vec<(u32, u32)>>,
    /// Source frame index per point.
    pub frames: Option<Vec<u32>>,
}

impl PointCloud {
    pub fn from_points(points: Vec<Vec3>) -> Self {
        Self {
            points,
            pixels: None,
            frames: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Tags every point with a source frame.
    pub fn with_frame(mut self, frame: u32) -> Self {
        self.frames = Some(vec![frame; self.points.len()]);
        self
    }

    /// Keeps every `step`-th point so that at most `max` remain.
    pub fn subsample(&self, max: usize) -> PointCloud {
        if max == 0 || self.points.len() <= max {
            return self.clone();
        }
        let n = self.points.len();
        let pick: Vec<usize> = (0..max).map(|i| i * n / max).collect();
        PointCloud {
            points: pick.iter().map(|&i| self.points[i]).collect(),
            pixels: self.pixels.as_ref().map(|p| pick.iter().map(|&i| p[i]).collect()),
            frames: self.frames.as_ref().map(|f| pick.iter().map(|&i| f[i]).collect()),
        }
    }

    /// Appends `other`; provenance is kept only when both sides carry it.
    pub fn extend(&mut self, other: &PointCloud) {
        let was_empty = self.points.is_empty();
        self.points.extend_from_slice(&other.points);
        self.frames = match (self.frames.take(), &other.frames) {
            (Some(mut a), Some(b)) => {
                a.extend_from_slice(b);
                Some(a)
            }
            (None, Some(b)) if was_empty => Some(b.clone()),
            _ => None,
        };
        self.pixels = match (self.pixels.take(), &other.pixels) {
            (Some(mut a), Some(b)) => {
                a.extend_from_slice(b);
                Some(a)
            }
            (None, Some(b)) if was_empty => Some(b.clone()),
            _ => None,
        };
    }
}

/// Back-projects every valid depth pixel through the pinhole model.
pub fn lift_depth(depth: &DepthMap, k: &CameraIntrinsics) -> PointCloud {
    let mut points = Vec::new();
    let mut pixels = Vec::new();
    for v in 0..depth.height() {
        for u in 0..depth.width() {
            let d = depth.get(u, v);
            if d > 0.0 {
                points.push(k.lift(u as f64, v as f64, d as f64));
                pixels.push((u, v));
            }
        }
    }
    PointCloud {
        points,
        pixels: Some(pixels),
        frames: None,
    }
}

/// Lifts only masked pixels, grouped by instance id. Equivalent to
/// [`lift_depth`] followed by [`extract_instance_points`] for every id.
pub fn lift_instances(depth: &DepthMap, mask: &InstanceMaskFrame, k: &CameraIntrinsics) -> BTreeMap<u16, PointCloud> {
    let mut out: BTreeMap<u16, PointCloud> = mask
        .instances()
        .keys()
        .map(|&id| {
            (
                id,
                PointCloud {
                    points: Vec::new(),
                    pixels: Some(Vec::new()),
                    frames: None,
                },
            )
        })
        .collect();
    for (&id, info) in mask.instances() {
        let cloud = out.get_mut(&id).unwrap();
        let [u0, v0, u1, v1] = info.bbox;
        for v in v0..=v1 {
            for u in u0..=u1 {
                if mask.id_at(u, v) != id {
                    continue;
                }
                let d = depth.get(u, v);
                if d > 0.0 {
                    cloud.points.push(k.lift(u as f64, v as f64, d as f64));
                    cloud.pixels.as_mut().unwrap().push((u, v));
                }
            }
        }
    }
    out
}

/// Pinhole projection to (sub)pixel coordinates.
pub fn project(p: &Vec3, k: &CameraIntrinsics) -> Result<(f64, f64), GeometryError> {
    if !(p.z > 0.0) {
        return Err(GeometryError::NonPositiveDepth(p.z));
    }
    Ok((k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy))
}

/// Re-expresses points from `from_pose`'s camera frame in `to_pose`'s.
pub fn transform_points(cloud: &PointCloud, from_pose: &EgoPose, to_pose: &EgoPose) -> PointCloud {
    let rot = to_pose.rotation.transpose() * from_pose.rotation;
    let shift = to_pose.rotation.transpose() * (from_pose.translation - to_pose.translation);
    PointCloud {
        points: cloud.points.iter().map(|p| rot * p + shift).collect(),
        pixels: cloud.pixels.clone(),
        frames: cloud.frames.clone(),
    }
}

/// Points of `cloud` whose pixel of origin carries instance `id`.
pub fn extract_instance_points(cloud: &PointCloud, mask: &InstanceMaskFrame, id: u16) -> Result<PointCloud, GeometryError> {
    if id == 0 || mask.instance(id).is_none() {
        return Err(GeometryError::UnknownInstanceId(id));
    }
    let pixels = cloud.pixels.as_ref().ok_or(GeometryError::MissingPixelOrigin)?;
    let mut out = PointCloud {
        points: Vec::new(),
        pixels: Some(Vec::new()),
        frames: cloud.frames.as_ref().map(|_| Vec::new()),
    };
    for (i, &(u, v)) in pixels.iter().enumerate() {
        if mask.id_at(u, v) == id {
            out.points.push(cloud.points[i]);
            out.pixels.as_mut().unwrap().push((u, v));
            if let (Some(dst), Some(src)) = (out.frames.as_mut(), cloud.frames.as_ref()) {
                dst.push(src[i]);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn k750() -> CameraIntrinsics {
        CameraIntrinsics::new(750.0, 750.0, 600.0, 180.0).unwrap()
    }

    #[test]
    fn principal_point_lifts_onto_axis() {
        let k = k750();
        let p = k.lift(600.0, 180.0, 5.0);
        assert_eq!(p, Vec3::new(0.0, 0.0, 5.0));
        assert_eq!(project(&Vec3::new(0.0, 0.0, 5.0), &k).unwrap(), (600.0, 180.0));
    }

    #[test]
    fn lift_and_project_hand_values() {
        let k = k750();
        let depth = {
            let mut vals = vec![0.0f32; 1000 * 200];
            vals[180 * 1000 + 975] = 10.0;
            DepthMap::new(1000, 200, vals).unwrap()
        };
        let cloud = lift_depth(&depth, &k);
        assert_eq!(cloud.len(), 1);
        assert!((cloud.points[0] - Vec3::new(5.0, 0.0, 10.0)).norm() < 1e-12);
        let (u, v) = project(&Vec3::new(5.0, 0.0, 10.0), &k).unwrap();
        assert!((u - 975.0).abs() < 1e-9 && (v - 180.0).abs() < 1e-9);
    }

    #[test]
    fn zero_depth_yields_empty_cloud_and_projection_error() {
        let depth = DepthMap::new(4, 3, vec![0.0; 12]).unwrap();
        assert!(lift_depth(&depth, &k750()).is_empty());
        assert_eq!(
            project(&Vec3::new(1.0, 1.0, 0.0), &k750()),
            Err(GeometryError::NonPositiveDepth(0.0))
        );
    }

    #[test]
    fn identity_and_translation_transforms() {
        let cloud = PointCloud::from_points(vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(-1.0, 0.5, 9.0)]);
        let p = EgoPose::from_heading(0.3, Vec3::new(1.0, 2.0, 3.0), 0);
        assert_eq!(transform_points(&cloud, &p, &p).points.len(), 2);
        for (a, b) in transform_points(&cloud, &p, &p).points.iter().zip(&cloud.points) {
            assert!((a - b).norm() < 1e-12);
        }
        let from = EgoPose::new(Matrix3::identity(), Vec3::new(1.0, 0.0, 0.0), 0).unwrap();
        let to = EgoPose::identity(1);
        let moved = transform_points(&cloud, &from, &to);
        for (a, b) in moved.points.iter().zip(&cloud.points) {
            assert_eq!(a - b, Vec3::new(1.0, 0.0, 0.0));
        }
    }

    #[test]
    fn pose_rejects_reflection() {
        let r = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0));
        assert!(EgoPose::new(r, Vec3::zeros(), 0).is_err());
    }

    #[test]
    fn extract_left_half() {
        let (w, h) = (6u32, 4u32);
        let depth = DepthMap::new(w, h, (0..w * h).map(|i| if i == 7 { 0.0 } else { 2.0 }).collect()).unwrap();
        let ids: Vec<u16> = (0..w * h).map(|i| if i % w < w / 2 { 1 } else { 0 }).collect();
        let mask = InstanceMaskFrame::new(w, h, ids, &BTreeMap::from([(1, 0.5)])).unwrap();
        let cloud = lift_depth(&depth, &k750());
        let left = extract_instance_points(&cloud, &mask, 1).unwrap();
        // 12 left-half pixels, one (u=1, v=1) has invalid depth.
        assert_eq!(left.len(), 11);
        assert!(left.pixels.unwrap().iter().all(|&(u, _)| u < 3));
        assert_eq!(
            extract_instance_points(&cloud, &mask, 4),
            Err(GeometryError::UnknownInstanceId(4))
        );
        let grouped = lift_instances(&depth, &mask, &k750());
        assert_eq!(grouped[&1].points, extract_instance_points(&cloud, &mask, 1).unwrap().points);
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), -PI);
        assert!((wrap_angle(3.2) - (3.2 - 2.0 * PI)).abs() < 1e-12);
        assert_eq!(wrap_angle(0.5), 0.5);
        assert!(wrap_angle(-PI - 1e-12) < PI);
    }

    #[test]
    fn subsample_keeps_provenance() {
        let c = PointCloud::from_points((0..100).map(|i| Vec3::new(i as f64, 0.0, 1.0)).collect()).with_frame(3);
        let s = c.subsample(10);
        assert_eq!(s.len(), 10);
        assert_eq!(s.frames.unwrap(), vec![3; 10]);
        assert_eq!(s.points[1].x, 10.0);
    }
}

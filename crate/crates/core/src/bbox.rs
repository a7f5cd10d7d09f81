//! 7-DOF box type and conversion to KITTI label records.
//!
//! Internally yaw is the heading angle in the x-z plane measured from +x
//! toward +z, so a box with yaw `t` points along `(cos t, 0, sin t)`. KITTI's
//! `rotation_y` is the negation of that angle.

use serde::{Deserialize, Serialize};

use crate::geometry::{wrap_angle, Vec3};
use crate::io::LabelRecord;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dims {
    pub length: f64,
    pub width: f64,
    pub height: f64,
}

impl Dims {
    pub const fn new(length: f64, width: f64, height: f64) -> Self {
        Self { length, width, height }
    }

    pub fn is_valid(&self) -> bool {
        [self.length, self.width, self.height]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Box3D {
    /// Geometric center in camera coordinates.
    pub center: Vec3,
    pub dims: Dims,
    pub yaw: f64,
    pub score: f64,
    pub frame: u32,
    /// Optional evaluation bucket (difficulty tag) for ground-truth boxes.
    pub bucket: Option<u8>,
}

impl Box3D {
    pub fn new(center: Vec3, dims: Dims, yaw: f64) -> Self {
        Self {
            center,
            dims,
            yaw: wrap_angle(yaw),
            score: 1.0,
            frame: 0,
            bucket: None,
        }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    pub fn with_frame(mut self, frame: u32) -> Self {
        self.frame = frame;
        self
    }

    /// Unit heading vector in the x-z plane.
    pub fn heading(&self) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        (c, s)
    }

    /// Footprint corners `(x, z)` in counter-clockwise order (x right, z up).
    pub fn bev_corners(&self) -> [(f64, f64); 4] {
        let (c, s) = self.heading();
        let hl = self.dims.length / 2.0;
        let hw = self.dims.width / 2.0;
        let (x, z) = (self.center.x, self.center.z);
        let along = (c * hl, s * hl);
        let across = (-s * hw, c * hw);
        [
            (x + along.0 + across.0, z + along.1 + across.1),
            (x - along.0 + across.0, z - along.1 + across.1),
            (x - along.0 - across.0, z - along.1 - across.1),
            (x + along.0 - across.0, z + along.1 - across.1),
        ]
    }

    /// Vertical extent `[top, bottom]` (camera y points down).
    pub fn y_range(&self) -> (f64, f64) {
        let hh = self.dims.height / 2.0;
        (self.center.y - hh, self.center.y + hh)
    }

    pub fn volume(&self) -> f64 {
        self.dims.length * self.dims.width * self.dims.height
    }

    pub fn to_label(&self, class: &str, bbox2d: [f64; 4]) -> LabelRecord {
        let rotation_y = wrap_angle(-self.yaw);
        LabelRecord {
            class: class.to_string(),
            truncation: 0.0,
            occlusion: 0,
            alpha: wrap_angle(rotation_y - self.center.x.atan2(self.center.z)),
            bbox: bbox2d,
            h: self.dims.height,
            w: self.dims.width,
            l: self.dims.length,
            x: self.center.x,
            y: self.center.y + self.dims.height / 2.0,
            z: self.center.z,
            rotation_y,
            score: self.score,
        }
    }

    pub fn from_label(rec: &LabelRecord, frame: u32) -> Self {
        Self {
            center: Vec3::new(rec.x, rec.y - rec.h / 2.0, rec.z),
            dims: Dims::new(rec.l, rec.w, rec.h),
            yaw: wrap_angle(-rec.rotation_y),
            score: rec.score,
            frame,
            bucket: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_conversion_round_trip() {
        let b = Box3D::new(Vec3::new(1.0, 0.9, 12.0), Dims::new(3.9, 1.6, 1.5), 0.7).with_score(0.8);
        let rec = b.to_label("Car", [0.0, 0.0, 10.0, 10.0]);
        assert!((rec.y - 1.65).abs() < 1e-12);
        assert!((rec.rotation_y + 0.7).abs() < 1e-12);
        let back = Box3D::from_label(&rec, 0);
        assert!((back.center - b.center).norm() < 1e-12);
        assert!((back.yaw - b.yaw).abs() < 1e-12);
    }

    #[test]
    fn corners_of_axis_aligned_box() {
        let b = Box3D::new(Vec3::new(0.0, 0.0, 0.0), Dims::new(4.0, 2.0, 1.0), 0.0);
        let c = b.bev_corners();
        assert_eq!(c[0], (2.0, 1.0));
        assert_eq!(c[2], (-2.0, -1.0));
    }
}

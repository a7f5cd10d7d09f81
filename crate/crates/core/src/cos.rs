//! Canonical object space: box positions rescaled by `f_canonical / f_frame`
//! so labels from cameras with different focal lengths agree on apparent
//! size versus depth.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbox::Box3D;
use crate::geometry::CameraIntrinsics;

#[derive(Debug, Error, PartialEq)]
pub enum CosError {
    #[error("focal length {0} must be > 0")]
    NonPositiveFocal(f64),
    #[error("scale factor {0} must be > 0")]
    NonPositiveScale(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CosConfig {
    /// Pixels.
    pub canonical_focal: f64,
}

impl Default for CosConfig {
    fn default() -> Self {
        Self { canonical_focal: 750.0 }
    }
}

pub fn scale_factor(frame_focal: f64, cfg: &CosConfig) -> Result<f64, CosError> {
    if !(frame_focal > 0.0) || !frame_focal.is_finite() {
        return Err(CosError::NonPositiveFocal(frame_focal));
    }
    if !(cfg.canonical_focal > 0.0) {
        return Err(CosError::NonPositiveFocal(cfg.canonical_focal));
    }
    Ok(cfg.canonical_focal / frame_focal)
}

/// Scale factor for a calibrated camera; uses the geometric mean focal.
pub fn scale_factor_for(k: &CameraIntrinsics, cfg: &CosConfig) -> Result<f64, CosError> {
    scale_factor(k.focal(), cfg)
}

fn check(omega: f64) -> Result<(), CosError> {
    if omega > 0.0 && omega.is_finite() {
        Ok(())
    } else {
        Err(CosError::NonPositiveScale(omega))
    }
}

/// Scales the position only; size and yaw are untouched.
pub fn to_canonical(b: &Box3D, omega: f64) -> Result<Box3D, CosError> {
    check(omega)?;
    let mut out = b.clone();
    out.center = b.center * omega;
    Ok(out)
}

pub fn from_canonical(b: &Box3D, omega: f64) -> Result<Box3D, CosError> {
    check(omega)?;
    let mut out = b.clone();
    out.center = b.center / omega;
    Ok(out)
}

/// Focal length seen by a detector after resizing and scale augmentation.
pub fn effective_focal(base_focal: f64, resize_ratio: f64, augment_scale: f64) -> f64 {
    base_focal * resize_ratio * augment_scale
}

//! Local object motion model: decides whether a track is parked or moving
//! from the statistics of its frame-to-frame displacements, and merges the
//! point sets of parked tracks.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{PointCloud, Vec3};
use crate::tracker::{InstanceTrack, MotionClass};

#[derive(Debug, Error, PartialEq)]
pub enum LommError {
    #[error("track has {0} entries, motion statistics need at least 2")]
    TooShort(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionStats {
    /// Mean displacement per frame.
    pub mu: Vec3,
    /// Component-wise displacement spread, including the 1/sqrt(2) factor.
    pub sigma: Vec3,
    pub z_ratio: f64,
    pub net_distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LommConfig {
    pub z_threshold: f64,
    /// Meters.
    pub min_net_distance: f64,
}

impl Default for LommConfig {
    fn default() -> Self {
        Self {
            z_threshold: 0.2,
            min_net_distance: 5.0,
        }
    }
}

pub fn motion_stats_from_locations(locs: &[Vec3]) -> Result<MotionStats, LommError> {
    if locs.len() < 2 {
        return Err(LommError::TooShort(locs.len()));
    }
    let deltas: Vec<Vec3> = locs.windows(2).map(|w| w[1] - w[0]).collect();
    let n = deltas.len() as f64;
    let mu = deltas.iter().fold(Vec3::zeros(), |a, d| a + d) / n;
    let var = deltas
        .iter()
        .fold(Vec3::zeros(), |a, d| a + (mu - d).component_mul(&(mu - d)))
        / n;
    let sigma = var.map(f64::sqrt) / std::f64::consts::SQRT_2;
    let (mu_norm, sigma_norm) = (mu.norm(), sigma.norm());
    let z_ratio = if sigma_norm > 0.0 {
        mu_norm / sigma_norm
    } else if mu_norm > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    let net_distance = (locs[locs.len() - 1] - locs[0]).norm();
    Ok(MotionStats {
        mu,
        sigma,
        z_ratio,
        net_distance,
    })
}

pub fn motion_stats(track: &InstanceTrack) -> Result<MotionStats, LommError> {
    let locs: Vec<Vec3> = track.locations().copied().collect();
    motion_stats_from_locations(&locs)
}

/// Moving only when both the z-ratio and the net travelled distance exceed
/// their thresholds.
pub fn classify(stats: &MotionStats, cfg: &LommConfig) -> MotionClass {
    if stats.z_ratio > cfg.z_threshold && stats.net_distance > cfg.min_net_distance {
        MotionClass::Moving
    } else {
        MotionClass::Stationary
    }
}

/// Classifies a whole track; tracks with fewer than two entries are
/// stationary.
pub fn classify_track(track: &InstanceTrack, cfg: &LommConfig) -> MotionClass {
    match motion_stats(track) {
        Ok(stats) => classify(&stats, cfg),
        Err(LommError::TooShort(_)) => MotionClass::Stationary,
    }
}

/// Concatenates all per-frame point sets of a track (already in reference
/// coordinates), keeping each point's source frame.
pub fn aggregate_stationary(track: &InstanceTrack) -> PointCloud {
    let mut out = PointCloud {
        points: Vec::new(),
        pixels: None,
        frames: Some(Vec::new()),
    };
    for e in &track.entries {
        out.points.extend_from_slice(&e.points.points);
        let frames = out.frames.as_mut().unwrap();
        match &e.points.frames {
            Some(f) => frames.extend_from_slice(f),
            None => frames.extend(std::iter::repeat_n(e.frame, e.points.len())),
        }
    }
    out
}

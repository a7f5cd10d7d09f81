//! Frame-to-frame instance association in world coordinates.
//!
//! Each detection is summarised by the coordinate-wise median of its points.
//! Tracks predict their next location with a short constant-velocity model
//! and are matched to detections by mutual nearest neighbour inside a gate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{lift_instances, transform_points, EgoPose, PointCloud, Vec3};
use crate::io::{Frame, Sequence};
use crate::stats::median;

#[derive(Debug, Error, PartialEq)]
pub enum TrackError {
    #[error("cannot locate an empty point cloud")]
    EmptyCloud,
    #[error("invalid tracker config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    pub frames_before: usize,
    pub frames_after: usize,
    /// Association gate in meters.
    pub gate_distance: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            frames_before: 50,
            frames_after: 50,
            gate_distance: 3.0,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<(), TrackError> {
        if !(self.gate_distance.is_finite() && self.gate_distance > 0.0) {
            return Err(TrackError::InvalidConfig(format!(
                "gate_distance {} must be > 0",
                self.gate_distance
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionClass {
    #[default]
    Unset,
    Stationary,
    Moving,
}

/// One instance observed in one frame, in that frame's camera coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub instance_id: u16,
    pub points: PointCloud,
    pub location: Vec3,
    pub confidence: f64,
    pub bbox2d: [f64; 4],
    /// Valid points before any subsampling.
    pub point_count: usize,
}

/// All detections of a frame together with the frame's pose.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameDetections {
    pub frame: u32,
    pub pose: EgoPose,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackEntry {
    pub frame: u32,
    /// Location in the coordinates the track is expressed in.
    pub location: Vec3,
    pub points: PointCloud,
    pub confidence: f64,
    pub instance_id: u16,
    pub bbox2d: [f64; 4],
    pub point_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceTrack {
    pub id: usize,
    pub entries: Vec<TrackEntry>,
    pub motion: MotionClass,
}

impl InstanceTrack {
    pub fn locations(&self) -> impl Iterator<Item = &Vec3> {
        self.entries.iter().map(|e| &e.location)
    }

    pub fn entry_at(&self, frame: u32) -> Option<&TrackEntry> {
        self.entries.iter().find(|e| e.frame == frame)
    }

    pub fn entry_index(&self, frame: u32) -> Option<usize> {
        self.entries.iter().position(|e| e.frame == frame)
    }
}

/// Coordinate-wise median of a cloud.
pub fn instance_location(points: &PointCloud) -> Result<Vec3, TrackError> {
    if points.is_empty() {
        return Err(TrackError::EmptyCloud);
    }
    let axis = |i: usize| -> f64 {
        let vals: Vec<f64> = points.points.iter().map(|p| p[i]).collect();
        median(&vals).expect("nonempty")
    };
    Ok(Vec3::new(axis(0), axis(1), axis(2)))
}

/// Last location plus the mean of up to three most recent displacements.
pub fn predict_location(track: &InstanceTrack) -> Vec3 {
    let locs: Vec<&Vec3> = track.locations().collect();
    let last = *locs.last().expect("track has at least one entry");
    let deltas: Vec<Vec3> = locs
        .windows(2)
        .rev()
        .take(3)
        .map(|w| w[1] - w[0])
        .collect();
    if deltas.is_empty() {
        return *last;
    }
    let mean = deltas.iter().fold(Vec3::zeros(), |acc, d| acc + d) / deltas.len() as f64;
    last + mean
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Assignment {
    /// `(track index, detection index)` pairs.
    pub matches: Vec<(usize, usize)>,
    /// Detections that open new tracks.
    pub unmatched: Vec<usize>,
}

/// Mutual nearest-neighbour matching under a distance gate.
///
/// `predictions` holds `(track id, predicted location)`; ties go to the
/// smaller track id, and among detections to the smaller index.
pub fn associate_frame(predictions: &[(usize, Vec3)], detections: &[Vec3], gate_distance: f64) -> Assignment {
    let nearest_track = |d: &Vec3| -> Option<(usize, f64)> {
        predictions
            .iter()
            .enumerate()
            .map(|(ti, (id, p))| (ti, *id, (p - d).norm()))
            .min_by(|a, b| a.2.total_cmp(&b.2).then(a.1.cmp(&b.1)))
            .map(|(ti, _, dist)| (ti, dist))
    };
    let nearest_detection = |p: &Vec3| -> Option<usize> {
        detections
            .iter()
            .enumerate()
            .map(|(di, d)| (di, (p - d).norm()))
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .map(|(di, _)| di)
    };
    let mut out = Assignment::default();
    for (di, d) in detections.iter().enumerate() {
        let matched = nearest_track(d).and_then(|(ti, dist)| {
            (dist < gate_distance && nearest_detection(&predictions[ti].1) == Some(di)).then_some(ti)
        });
        match matched {
            Some(ti) => out.matches.push((ti, di)),
            None => out.unmatched.push(di),
        }
    }
    out
}

/// Extracts per-instance points and locations of one frame.
///
/// At most `max_points` points are kept per instance (evenly strided); the
/// location is always the median of the full set.
pub fn detect_frame(frame: &Frame, max_points: usize) -> FrameDetections {
    let clouds = lift_instances(&frame.depth, &frame.mask, &frame.intrinsics);
    let detections = clouds
        .into_iter()
        .filter(|(_, c)| !c.is_empty())
        .map(|(id, cloud)| {
            let info = frame.mask.instance(id).expect("id from mask");
            let location = instance_location(&cloud).expect("nonempty");
            let [u0, v0, u1, v1] = info.bbox;
            Detection {
                instance_id: id,
                point_count: cloud.len(),
                points: cloud.subsample(max_points).with_frame(frame.index),
                location,
                confidence: info.confidence,
                bbox2d: [u0 as f64, v0 as f64, u1 as f64, v1 as f64],
            }
        })
        .collect();
    FrameDetections {
        frame: frame.index,
        pose: frame.pose,
        detections,
    }
}

/// Tracks instances over the window around `reference_frame`.
///
/// Matching runs in world coordinates. Returned tracks have their points and
/// locations re-expressed in the reference frame's camera coordinates. If
/// the reference frame is absent from `frames` no tracks are produced.
pub fn track_detections(frames: &[FrameDetections], reference_frame: u32, cfg: &TrackerConfig) -> Vec<InstanceTrack> {
    let Some(reference) = frames.iter().find(|f| f.frame == reference_frame) else {
        return Vec::new();
    };
    let lo = reference_frame.saturating_sub(cfg.frames_before as u32);
    let hi = reference_frame.saturating_add(cfg.frames_after as u32);
    let mut window: Vec<&FrameDetections> = frames.iter().filter(|f| f.frame >= lo && f.frame <= hi).collect();
    window.sort_by_key(|f| f.frame);

    // World-frame tracks; `active` holds indices of tracks matched in the
    // previous processed frame.
    let mut tracks: Vec<InstanceTrack> = Vec::new();
    let mut active: Vec<usize> = Vec::new();
    let mut last_frame: Option<u32> = None;
    for fd in window {
        if last_frame.is_some_and(|lf| fd.frame != lf + 1) {
            active.clear();
        }
        last_frame = Some(fd.frame);
        let world: Vec<Vec3> = fd.detections.iter().map(|d| fd.pose.to_world(&d.location)).collect();
        let predictions: Vec<(usize, Vec3)> = active
            .iter()
            .map(|&ti| (tracks[ti].id, predict_location(&tracks[ti])))
            .collect();
        let assignment = associate_frame(&predictions, &world, cfg.gate_distance);
        let mut next_active = Vec::with_capacity(world.len());
        let entry = |di: usize| {
            let d = &fd.detections[di];
            TrackEntry {
                frame: fd.frame,
                location: world[di],
                points: d.points.clone(),
                confidence: d.confidence,
                instance_id: d.instance_id,
                bbox2d: d.bbox2d,
                point_count: d.point_count,
            }
        };
        for (pi, di) in assignment.matches {
            let ti = active[pi];
            tracks[ti].entries.push(entry(di));
            next_active.push(ti);
        }
        for di in assignment.unmatched {
            let id = tracks.len();
            tracks.push(InstanceTrack {
                id,
                entries: vec![entry(di)],
                motion: MotionClass::Unset,
            });
            next_active.push(id);
        }
        next_active.sort_unstable();
        active = next_active;
    }

    // Re-express in the reference camera frame.
    let pose_of = |frame: u32| frames.iter().find(|f| f.frame == frame).map(|f| f.pose);
    for track in &mut tracks {
        for e in &mut track.entries {
            let from = pose_of(e.frame).expect("frame in window");
            e.points = transform_points(&e.points, &from, &reference.pose);
            e.location = reference.pose.from_world(&e.location);
        }
    }
    tracks
}

/// Convenience wrapper running detection and tracking straight from a
/// sequence.
pub fn track_sequence(seq: &Sequence, reference_frame: u32, cfg: &TrackerConfig, max_points: usize) -> Vec<InstanceTrack> {
    let lo = reference_frame.saturating_sub(cfg.frames_before as u32);
    let hi = reference_frame.saturating_add(cfg.frames_after as u32);
    let frames: Vec<FrameDetections> = seq
        .frames
        .iter()
        .filter(|f| f.index >= lo && f.index <= hi)
        .map(|f| detect_frame(f, max_points))
        .collect();
    track_detections(&frames, reference_frame, cfg)
}

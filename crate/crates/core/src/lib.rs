//! Auto-labelling of 3D vehicle boxes from monocular depth, instance masks
//! and ego-motion.
//!
//! Stages, in pipeline order: [`geometry`] lifts masked depth to points,
//! [`tracker`] associates instances over a window of frames, [`lomm`] splits
//! parked from moving tracks, [`boxfit`] estimates yaw and size, [`refine`]
//! snaps position and heading to a vehicle template and [`cos`] optionally
//! rescales labels to a canonical focal length. [`eval`] scores labels and
//! [`synth`] renders scenes with known ground truth.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bbox;
pub mod boxfit;
pub mod cos;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod lomm;
pub mod pipeline;
pub mod refine;
pub mod registry;
pub mod stats;
pub mod synth;
pub mod tracker;

pub use bbox::{Box3D, Dims};
pub use geometry::{CameraIntrinsics, EgoPose, PointCloud, Vec3};
pub use registry::Registry;

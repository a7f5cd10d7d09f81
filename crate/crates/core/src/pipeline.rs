//! End-to-end labelling of a sequence and directory-level evaluation.
//!
//! Every reference frame is labelled from its own tracking pass over the
//! surrounding window. Per-frame lifting is shared between passes because
//! it depends only on that frame's inputs.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbox::Box3D;
use crate::boxfit::{
    estimate_vertical, fit_bev_box_with, fit_fixed_yaw, moving_yaw, sanitize_dims, stationary_box, viewing_angle, BoxFitConfig,
    BoxFitError, YawCriterion, MIN_FIT_POINTS,
};
use crate::cos::{scale_factor_for, to_canonical, CosConfig, CosError};
use crate::eval::{standard_report, EvalConfig, EvalReport};
use crate::geometry::Vec3;
use crate::io::{frame_file_name, read_labels, read_sequence, write_labels, IoError, LabelRecord, Sequence};
use crate::lomm::{aggregate_stationary, LommConfig};
use crate::refine::{make_template, refine_pose_with, refine_position_with, RefineConfig, RefineError};
use crate::registry::{MotionClassifier, Registry};
use crate::tracker::{detect_frame, track_detections, FrameDetections, InstanceTrack, MotionClass, TrackerConfig};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("frame {frame}, track {track}: {source}")]
    Fit {
        frame: u32,
        track: usize,
        #[source]
        source: BoxFitError,
    },
    #[error("frame {frame}, track {track}: {source}")]
    Refine {
        frame: u32,
        track: usize,
        #[source]
        source: RefineError,
    },
    #[error("frame {frame}: {source}")]
    Canonical {
        frame: u32,
        #[source]
        source: CosError,
    },
    #[error("prediction and ground-truth frame sets differ: {only_pred} only in predictions, {only_gt} only in ground truth")]
    FrameSetMismatch { only_pred: usize, only_gt: usize },
    #[error("cannot create worker pool: {0}")]
    Pool(String),
}

/// Settings of the orchestration itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Motion classifier name in the registry.
    pub classifier: String,
    /// Worker threads; 0 uses all cores.
    pub parallelism: usize,
    /// Emit labels in canonical object space.
    pub canonical: bool,
    /// Label directory; the CLI flag takes precedence.
    pub output: Option<PathBuf>,
    /// Points needed in the reference-frame detection to emit a label.
    pub min_points: usize,
    /// Per-frame, per-instance cap on points carried through tracking.
    pub max_instance_points: usize,
    /// Cap on the aggregated cloud used for box fitting.
    pub max_fit_points: usize,
    /// Class written to label files.
    pub class_name: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            classifier: "lomm".into(),
            parallelism: 0,
            canonical: false,
            output: None,
            min_points: MIN_FIT_POINTS,
            max_instance_points: 400,
            max_fit_points: 1000,
            class_name: "Car".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub tracker: TrackerConfig,
    pub lomm: LommConfig,
    pub boxfit: BoxFitConfig,
    pub refine: RefineConfig,
    pub cos: CosConfig,
    pub eval: EvalConfig,
    pub run: RunConfig,
}

impl PipelineConfig {
    /// Parses TOML; sections or dotted keys (`lomm.z_threshold = 0.2`).
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |e: String| PipelineError::Config(e);
        self.tracker.validate().map_err(|e| bad(e.to_string()))?;
        self.boxfit.validate().map_err(|e| bad(e.to_string()))?;
        self.refine.validate().map_err(|e| bad(e.to_string()))?;
        if !(self.lomm.z_threshold >= 0.0 && self.lomm.min_net_distance >= 0.0) {
            return Err(bad("lomm thresholds must be >= 0".into()));
        }
        if !(self.cos.canonical_focal > 0.0) {
            return Err(bad("cos.canonical_focal must be > 0".into()));
        }
        if !(self.eval.iou_threshold > 0.0 && self.eval.iou_threshold <= 1.0) {
            return Err(bad("eval.iou_threshold must be in (0, 1]".into()));
        }
        if self.run.max_instance_points < MIN_FIT_POINTS || self.run.max_fit_points < MIN_FIT_POINTS {
            return Err(bad(format!("point caps must be >= {MIN_FIT_POINTS}")));
        }
        Ok(())
    }
}

/// Wall time spent in each stage for one reference frame.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StageTimes {
    /// Lifting this frame's instances to points.
    pub lift: Duration,
    pub tracking: Duration,
    /// Motion classification plus point aggregation / trajectory yaw.
    pub aggregation: Duration,
    pub fitting: Duration,
    pub refinement: Duration,
    /// Canonical transform and label conversion.
    pub output: Duration,
}

impl StageTimes {
    pub fn total(&self) -> Duration {
        self.lift + self.tracking + self.aggregation + self.fitting + self.refinement + self.output
    }

    /// Tracking, aggregation, fitting and refinement.
    pub fn core(&self) -> Duration {
        self.tracking + self.aggregation + self.fitting + self.refinement
    }

    fn add(&mut self, o: &StageTimes) {
        self.lift += o.lift;
        self.tracking += o.tracking;
        self.aggregation += o.aggregation;
        self.fitting += o.fitting;
        self.refinement += o.refinement;
        self.output += o.output;
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FrameTiming {
    pub frame: u32,
    pub labels: usize,
    pub stages: StageTimes,
    /// Measured wall time of the frame, from the same clock readings as
    /// the stages.
    pub wall: Duration,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct TimingReport {
    pub frames: Vec<FrameTiming>,
}

impl TimingReport {
    pub fn totals(&self) -> StageTimes {
        let mut t = StageTimes::default();
        for f in &self.frames {
            t.add(&f.stages);
        }
        t
    }

    /// Mean per-frame time of tracking, aggregation, fitting and refinement.
    pub fn mean_core(&self) -> Duration {
        if self.frames.is_empty() {
            return Duration::ZERO;
        }
        self.totals().core() / self.frames.len() as u32
    }

    pub fn to_json(&self) -> String {
        let ms = |d: Duration| d.as_secs_f64() * 1e3;
        let frames: Vec<_> = self
            .frames
            .iter()
            .map(|f| {
                serde_json::json!({
                    "frame": f.frame,
                    "labels": f.labels,
                    "lift_ms": ms(f.stages.lift),
                    "tracking_ms": ms(f.stages.tracking),
                    "aggregation_ms": ms(f.stages.aggregation),
                    "fitting_ms": ms(f.stages.fitting),
                    "refinement_ms": ms(f.stages.refinement),
                    "output_ms": ms(f.stages.output),
                    "wall_ms": ms(f.wall),
                })
            })
            .collect();
        serde_json::to_string_pretty(&serde_json::json!({
            "frames": frames,
            "mean_core_ms": ms(self.mean_core()),
        }))
        .expect("json")
    }
}

impl fmt::Display for TimingReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.frames.len().max(1) as f64;
        let t = self.totals();
        let ms = |d: Duration| d.as_secs_f64() * 1e3 / n;
        writeln!(f, "stage timing over {} frames (mean ms/frame)", self.frames.len())?;
        writeln!(f, "  lift         {:9.2}", ms(t.lift))?;
        writeln!(f, "  tracking     {:9.2}", ms(t.tracking))?;
        writeln!(f, "  aggregation  {:9.2}", ms(t.aggregation))?;
        writeln!(f, "  fitting      {:9.2}", ms(t.fitting))?;
        writeln!(f, "  refinement   {:9.2}", ms(t.refinement))?;
        writeln!(f, "  output       {:9.2}", ms(t.output))?;
        write!(f, "  total        {:9.2}", ms(t.total()))
    }
}

/// One emitted label with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameLabel {
    pub track: usize,
    pub motion: MotionClass,
    pub bbox2d: [f64; 4],
    pub boxed: Box3D,
}

#[derive(Debug, Clone)]
pub struct SequenceLabels {
    /// `(frame index, labels)` for every frame of the sequence, in order.
    pub frames: Vec<(u32, Vec<FrameLabel>)>,
    pub timing: TimingReport,
}

impl SequenceLabels {
    pub fn records(&self, class: &str) -> Vec<(u32, Vec<LabelRecord>)> {
        self.frames
            .iter()
            .map(|(f, ls)| (*f, ls.iter().map(|l| l.boxed.to_label(class, l.bbox2d)).collect()))
            .collect()
    }
}

/// Resolved strategies for one run.
struct Stages {
    classifier: Box<dyn MotionClassifier>,
    criterion: Box<dyn YawCriterion>,
}

fn resolve(cfg: &PipelineConfig, registry: &Registry) -> Result<Stages, PipelineError> {
    let classifier = registry.classifier(&cfg.run.classifier, &cfg.lomm).ok_or_else(|| {
        PipelineError::Config(format!(
            "unknown classifier `{}` (known: {})",
            cfg.run.classifier,
            registry.classifier_names().collect::<Vec<_>>().join(", ")
        ))
    })?;
    let criterion = registry.criterion(&cfg.boxfit.criterion, &cfg.boxfit).ok_or_else(|| {
        PipelineError::Config(format!(
            "unknown yaw criterion `{}` (known: {})",
            cfg.boxfit.criterion,
            registry.criterion_names().collect::<Vec<_>>().join(", ")
        ))
    })?;
    Ok(Stages { classifier, criterion })
}

/// Fits, refines and orients one track at the reference frame.
fn label_track(track: &InstanceTrack, reference: u32, motion: MotionClass, cfg: &PipelineConfig, stages: &Stages, times: &mut StageTimes, clock: &mut Instant) -> Result<Option<FrameLabel>, PipelineError> {
    let fit_err = |source| PipelineError::Fit {
        frame: reference,
        track: track.id,
        source,
    };
    let refine_err = |source| PipelineError::Refine {
        frame: reference,
        track: track.id,
        source,
    };
    let lap = |slot: &mut Duration, clock: &mut Instant| {
        let now = Instant::now();
        *slot += now - *clock;
        *clock = now;
    };

    let entry = track.entry_at(reference).expect("track covers reference");
    let (cloud, trajectory_yaw) = match motion {
        MotionClass::Moving => (entry.points.clone(), Some(moving_yaw(track, reference).map_err(fit_err)?)),
        _ => (aggregate_stationary(track).subsample(cfg.run.max_fit_points), None),
    };
    lap(&mut times.aggregation, clock);
    if cloud.len() < MIN_FIT_POINTS {
        return Ok(None);
    }

    let bev = match trajectory_yaw {
        Some(yaw) => fit_fixed_yaw(&cloud, yaw, &cfg.boxfit),
        None => fit_bev_box_with(&cloud, &cfg.boxfit, stages.criterion.as_ref()),
    }
    .map_err(fit_err)?;
    let (y_center, height) = estimate_vertical(&cloud).map_err(fit_err)?;
    let view = viewing_angle(entry.location.x, entry.location.z);
    let (yaw, dims) = match trajectory_yaw {
        Some(yaw) => (yaw, sanitize_dims(bev.dims.0, bev.dims.1, height, yaw, view, &cfg.boxfit)),
        None => stationary_box(&bev, height, view, &cfg.boxfit),
    };
    let (cx, cz) = bev.center;
    let initial = Box3D::new(Vec3::new(cx, y_center + (height - dims.height) / 2.0, cz), dims, yaw)
        .with_frame(reference)
        .with_score(entry.confidence);
    lap(&mut times.fitting, clock);

    let template = make_template(dims).map_err(refine_err)?;
    let oriented = match trajectory_yaw {
        // The trajectory fixes the heading; only the position is searched.
        Some(_) => refine_position_with(&initial, &cloud, &template, &cfg.refine).map_err(refine_err)?.0,
        None => refine_pose_with(&initial, &cloud, &template, &cfg.refine).map_err(refine_err)?.0,
    };
    lap(&mut times.refinement, clock);

    Ok(Some(FrameLabel {
        track: track.id,
        motion,
        bbox2d: entry.bbox2d,
        boxed: oriented,
    }))
}

fn label_reference(detections: &[FrameDetections], seq: &Sequence, position: usize, cfg: &PipelineConfig, stages: &Stages, lift_time: Duration) -> Result<(Vec<FrameLabel>, FrameTiming), PipelineError> {
    let frame = &seq.frames[position];
    let reference = frame.index;
    let mut times = StageTimes {
        lift: lift_time,
        ..Default::default()
    };
    let start = Instant::now();
    let mut clock = start;

    let tracks = track_detections(detections, reference, &cfg.tracker);
    let now = Instant::now();
    times.tracking += now - clock;
    clock = now;

    let mut labels = Vec::new();
    for track in &tracks {
        let Some(entry) = track.entry_at(reference) else {
            continue;
        };
        if entry.point_count < cfg.run.min_points {
            continue;
        }
        let motion = stages.classifier.classify(track);
        if let Some(label) = label_track(track, reference, motion, cfg, stages, &mut times, &mut clock)? {
            labels.push(label);
        }
    }

    if cfg.run.canonical {
        let omega = scale_factor_for(&frame.intrinsics, &cfg.cos).map_err(|source| PipelineError::Canonical {
            frame: reference,
            source,
        })?;
        for l in &mut labels {
            l.boxed = to_canonical(&l.boxed, omega).map_err(|source| PipelineError::Canonical {
                frame: reference,
                source,
            })?;
        }
    }
    let now = Instant::now();
    times.output += now - clock;

    Ok((
        labels.clone(),
        FrameTiming {
            frame: reference,
            labels: labels.len(),
            stages: times,
            wall: lift_time + (now - start),
        },
    ))
}

fn pool(parallelism: usize) -> Result<rayon::ThreadPool, PipelineError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| PipelineError::Pool(e.to_string()))
}

/// Labels every frame of an in-memory sequence.
pub fn autolabel_sequence(seq: &Sequence, cfg: &PipelineConfig, registry: &Registry) -> Result<SequenceLabels, PipelineError> {
    cfg.validate()?;
    let stages = resolve(cfg, registry)?;
    let pool = pool(cfg.run.parallelism)?;
    pool.install(|| {
        let lifted: Vec<(FrameDetections, Duration)> = seq
            .frames
            .par_iter()
            .map(|f| {
                let t = Instant::now();
                let d = detect_frame(f, cfg.run.max_instance_points);
                (d, t.elapsed())
            })
            .collect();
        let (detections, lift_times): (Vec<_>, Vec<_>) = lifted.into_iter().unzip();
        let per_frame: Vec<_> = (0..seq.frames.len())
            .into_par_iter()
            .map(|i| label_reference(&detections, seq, i, cfg, &stages, lift_times[i]))
            .collect::<Result<_, _>>()?;
        let mut frames = Vec::with_capacity(per_frame.len());
        let mut timing = TimingReport::default();
        for (labels, t) in per_frame {
            frames.push((t.frame, labels));
            timing.frames.push(t);
        }
        Ok(SequenceLabels { frames, timing })
    })
}

/// Reads a sequence directory, labels it and writes one label file per
/// frame to `out_dir` (empty files for frames without labels).
pub fn autolabel(sequence_dir: impl AsRef<Path>, out_dir: impl AsRef<Path>, cfg: &PipelineConfig, registry: &Registry) -> Result<SequenceLabels, PipelineError> {
    let seq = read_sequence(sequence_dir)?;
    let result = autolabel_sequence(&seq, cfg, registry)?;
    write_frame_labels(&result, out_dir.as_ref(), &cfg.run.class_name)?;
    Ok(result)
}

pub fn write_frame_labels(result: &SequenceLabels, out_dir: &Path, class: &str) -> Result<(), PipelineError> {
    std::fs::create_dir_all(out_dir).map_err(|source| IoError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    for (frame, records) in result.records(class) {
        write_labels(&records, out_dir.join(frame_file_name(frame, "txt")))?;
    }
    Ok(())
}

fn label_files(dir: &Path) -> Result<BTreeSet<u32>, PipelineError> {
    let entries = std::fs::read_dir(dir).map_err(|source| IoError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut out = BTreeSet::new();
    for entry in entries {
        let path = entry
            .map_err(|source| IoError::Io {
                path: dir.to_path_buf(),
                source,
            })?
            .path();
        if path.extension().and_then(|e| e.to_str()) != Some("txt") {
            continue;
        }
        if let Some(i) = path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse().ok()) {
            out.insert(i);
        }
    }
    Ok(out)
}

/// Reads all label files of a directory as boxes tagged with their frame.
pub fn read_label_dir(dir: &Path) -> Result<(BTreeSet<u32>, Vec<Box3D>), PipelineError> {
    let frames = label_files(dir)?;
    let mut boxes = Vec::new();
    for &f in &frames {
        for rec in read_labels(dir.join(frame_file_name(f, "txt")))? {
            boxes.push(Box3D::from_label(&rec, f));
        }
    }
    Ok((frames, boxes))
}

/// AP for both overlap modes at IoU 0.5 and 0.3 over matching label
/// directories.
pub fn evaluate(pred_dir: impl AsRef<Path>, gt_dir: impl AsRef<Path>, cfg: &EvalConfig) -> Result<EvalReport, PipelineError> {
    let (pred_frames, preds) = read_label_dir(pred_dir.as_ref())?;
    let (gt_frames, gts) = read_label_dir(gt_dir.as_ref())?;
    if pred_frames != gt_frames {
        return Err(PipelineError::FrameSetMismatch {
            only_pred: pred_frames.difference(&gt_frames).count(),
            only_gt: gt_frames.difference(&pred_frames).count(),
        });
    }
    Ok(standard_report(&preds, &gts, gt_frames.len(), cfg))
}

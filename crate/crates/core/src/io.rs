//! Scene input readers and label file I/O.
//!
//! On-disk layout of a sequence directory (frame index zero-padded to six
//! digits):
//!
//! ```text
//! depth/000000.bin   "SOWD" header + f32 depths, row-major
//! mask/000000.bin    "SOWM" header + u16 ids, row-major, then "id confidence" lines
//! pose/000000.txt    12 floats, row-major [R|t] (camera -> world)
//! calib/000000.txt   fx fy cx cy
//! label/000000.txt   KITTI label lines (ground truth, written by `synth`)
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::geometry::{wrap_angle, CameraIntrinsics, EgoPose};

pub const DEPTH_TAG: &[u8; 4] = b"SOWD";
pub const MASK_TAG: &[u8; 4] = b"SOWM";
const HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("frame {frame}: missing {kind} file {path}")]
    MissingFile {
        frame: u32,
        kind: &'static str,
        path: PathBuf,
    },
    #[error("frame {frame}: depth is {depth_w}x{depth_h} but mask is {mask_w}x{mask_h}")]
    DimensionMismatch {
        frame: u32,
        depth_w: u32,
        depth_h: u32,
        mask_w: u32,
        mask_h: u32,
    },
    #[error("{path}: malformed header: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("invalid label: {0}")]
    InvalidLabel(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, IoError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Metric depth per pixel; `0.0` marks an invalid pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: u32,
    height: u32,
    values: Vec<f32>,
}

impl DepthMap {
    pub fn new(width: u32, height: u32, values: Vec<f32>) -> Result<Self> {
        if values.len() != width as usize * height as usize {
            return Err(IoError::InvalidData(format!(
                "depth has {} values for {width}x{height}",
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(IoError::InvalidData(format!("depth value {bad} is not finite and >= 0")));
        }
        Ok(Self { width, height, values })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    #[inline]
    pub fn get(&self, u: u32, v: u32) -> f32 {
        self.values[(v * self.width + u) as usize]
    }
}

/// Per-instance metadata of a mask frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceInfo {
    /// Inclusive pixel bounds `[min_u, min_v, max_u, max_v]`.
    pub bbox: [u32; 4],
    pub confidence: f64,
    pub pixel_count: usize,
}

/// Instance id image (`0` = background) with its per-id table.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMaskFrame {
    width: u32,
    height: u32,
    ids: Vec<u16>,
    instances: BTreeMap<u16, InstanceInfo>,
}

impl InstanceMaskFrame {
    /// Builds a mask and derives the 2D box of every id. Every nonzero id
    /// present in `ids` needs an entry in `confidences`; table entries without
    /// pixels are dropped.
    pub fn new(width: u32, height: u32, ids: Vec<u16>, confidences: &BTreeMap<u16, f64>) -> Result<Self> {
        if ids.len() != width as usize * height as usize {
            return Err(IoError::InvalidData(format!(
                "mask has {} ids for {width}x{height}",
                ids.len()
            )));
        }
        let mut instances: BTreeMap<u16, InstanceInfo> = BTreeMap::new();
        for (i, &id) in ids.iter().enumerate() {
            if id == 0 {
                continue;
            }
            let u = (i % width as usize) as u32;
            let v = (i / width as usize) as u32;
            match instances.get_mut(&id) {
                Some(info) => {
                    info.bbox[0] = info.bbox[0].min(u);
                    info.bbox[1] = info.bbox[1].min(v);
                    info.bbox[2] = info.bbox[2].max(u);
                    info.bbox[3] = info.bbox[3].max(v);
                    info.pixel_count += 1;
                }
                None => {
                    let confidence = *confidences.get(&id).ok_or_else(|| {
                        IoError::InvalidData(format!("instance id {id} has no confidence entry"))
                    })?;
                    if !(0.0..=1.0).contains(&confidence) {
                        return Err(IoError::InvalidData(format!(
                            "instance {id} confidence {confidence} outside [0,1]"
                        )));
                    }
                    instances.insert(
                        id,
                        InstanceInfo {
                            bbox: [u, v, u, v],
                            confidence,
                            pixel_count: 1,
                        },
                    );
                }
            }
        }
        Ok(Self {
            width,
            height,
            ids,
            instances,
        })
    }

    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            ids: vec![0; width as usize * height as usize],
            instances: BTreeMap::new(),
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn ids(&self) -> &[u16] {
        &self.ids
    }

    #[inline]
    pub fn id_at(&self, u: u32, v: u32) -> u16 {
        self.ids[(v * self.width + u) as usize]
    }

    pub fn instances(&self) -> &BTreeMap<u16, InstanceInfo> {
        &self.instances
    }

    pub fn instance(&self, id: u16) -> Option<&InstanceInfo> {
        self.instances.get(&id)
    }
}

/// One frame of an input sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub index: u32,
    pub depth: DepthMap,
    pub mask: InstanceMaskFrame,
    pub intrinsics: CameraIntrinsics,
    pub pose: EgoPose,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Sequence {
    pub frames: Vec<Frame>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

pub fn frame_file_name(index: u32, ext: &str) -> String {
    format!("{index:06}.{ext}")
}

fn header(tag: &[u8; 4], width: u32, height: u32) -> [u8; HEADER_LEN] {
    let mut h = [0u8; HEADER_LEN];
    h[..4].copy_from_slice(tag);
    h[4..8].copy_from_slice(&width.to_le_bytes());
    h[8..12].copy_from_slice(&height.to_le_bytes());
    h
}

fn parse_header(bytes: &[u8], tag: &[u8; 4], path: &Path) -> Result<(u32, u32)> {
    let malformed = |reason: String| IoError::MalformedHeader {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < HEADER_LEN {
        return Err(malformed(format!("file is {} bytes, header needs {HEADER_LEN}", bytes.len())));
    }
    if &bytes[..4] != tag {
        return Err(malformed(format!(
            "expected tag {:?}, found {:?}",
            String::from_utf8_lossy(tag),
            String::from_utf8_lossy(&bytes[..4])
        )));
    }
    let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    Ok((width, height))
}

pub fn encode_depth(depth: &DepthMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + depth.values.len() * 4);
    out.extend_from_slice(&header(DEPTH_TAG, depth.width, depth.height));
    for v in &depth.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_depth(bytes: &[u8], path: &Path) -> Result<DepthMap> {
    let (width, height) = parse_header(bytes, DEPTH_TAG, path)?;
    let n = width as usize * height as usize;
    let body = &bytes[HEADER_LEN..];
    if body.len() != n * 4 {
        return Err(IoError::MalformedHeader {
            path: path.to_path_buf(),
            reason: format!("{width}x{height} needs {} payload bytes, found {}", n * 4, body.len()),
        });
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    DepthMap::new(width, height, values)
}

pub fn encode_mask(mask: &InstanceMaskFrame) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + mask.ids.len() * 2 + 32 * mask.instances.len());
    out.extend_from_slice(&header(MASK_TAG, mask.width, mask.height));
    for id in &mask.ids {
        out.extend_from_slice(&id.to_le_bytes());
    }
    let mut footer = String::new();
    for (id, info) in &mask.instances {
        // Shortest round-trip representation.
        let _ = writeln!(footer, "{id} {:?}", info.confidence);
    }
    out.extend_from_slice(footer.as_bytes());
    out
}

pub fn decode_mask(bytes: &[u8], path: &Path) -> Result<InstanceMaskFrame> {
    let (width, height) = parse_header(bytes, MASK_TAG, path)?;
    let n = width as usize * height as usize;
    let body = &bytes[HEADER_LEN..];
    if body.len() < n * 2 {
        return Err(IoError::MalformedHeader {
            path: path.to_path_buf(),
            reason: format!("{width}x{height} needs {} id bytes, found {}", n * 2, body.len()),
        });
    }
    let ids: Vec<u16> = body[..n * 2]
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    let footer = std::str::from_utf8(&body[n * 2..]).map_err(|e| IoError::Parse {
        path: path.to_path_buf(),
        line: 0,
        reason: format!("footer is not UTF-8: {e}"),
    })?;
    let mut confidences = BTreeMap::new();
    for (i, line) in footer.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |reason: String| IoError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let mut parts = line.split_whitespace();
        let (Some(id), Some(conf), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(parse_err(format!("expected 'id confidence', got {line:?}")));
        };
        let id: u16 = id.parse().map_err(|e| parse_err(format!("bad id: {e}")))?;
        let conf: f64 = conf.parse().map_err(|e| parse_err(format!("bad confidence: {e}")))?;
        confidences.insert(id, conf);
    }
    InstanceMaskFrame::new(width, height, ids, &confidences)
}

pub fn encode_pose(pose: &EgoPose) -> String {
    let r = pose.rotation();
    let t = pose.translation();
    let vals = [
        r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
        r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
        r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
    ];
    let mut s = vals.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" ");
    s.push('\n');
    s
}

fn parse_floats(text: &str, expected: usize, path: &Path) -> Result<Vec<f64>> {
    let line = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    let vals: std::result::Result<Vec<f64>, _> = line.split_whitespace().map(str::parse::<f64>).collect();
    let vals = vals.map_err(|e| IoError::Parse {
        path: path.to_path_buf(),
        line: 1,
        reason: e.to_string(),
    })?;
    if vals.len() != expected {
        return Err(IoError::Parse {
            path: path.to_path_buf(),
            line: 1,
            reason: format!("expected {expected} values, found {}", vals.len()),
        });
    }
    Ok(vals)
}

pub fn decode_pose(text: &str, frame: u32, path: &Path) -> Result<EgoPose> {
    let v = parse_floats(text, 12, path)?;
    let rotation = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
    let translation = Vector3::new(v[3], v[7], v[11]);
    EgoPose::new(rotation, translation, frame).map_err(|e| IoError::Parse {
        path: path.to_path_buf(),
        line: 1,
        reason: e.to_string(),
    })
}

pub fn encode_calib(k: &CameraIntrinsics) -> String {
    format!("{:?} {:?} {:?} {:?}\n", k.fx, k.fy, k.cx, k.cy)
}

pub fn decode_calib(text: &str, path: &Path) -> Result<CameraIntrinsics> {
    let v = parse_floats(text, 4, path)?;
    CameraIntrinsics::new(v[0], v[1], v[2], v[3]).map_err(|e| IoError::Parse {
        path: path.to_path_buf(),
        line: 1,
        reason: e.to_string(),
    })
}

/// Frame indices present in `dir` for files with the given extension.
fn frame_indices(dir: &Path, ext: &str) -> Result<BTreeSet<u32>> {
    let mut out = BTreeSet::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) != Some(ext) {
            continue;
        }
        if let Some(idx) = path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse().ok()) {
            out.insert(idx);
        }
    }
    Ok(out)
}

fn read_frame(root: &Path, index: u32) -> Result<Frame> {
    let need = |sub: &str, ext: &str, kind: &'static str| -> Result<PathBuf> {
        let p = root.join(sub).join(frame_file_name(index, ext));
        if p.is_file() {
            Ok(p)
        } else {
            Err(IoError::MissingFile {
                frame: index,
                kind,
                path: p,
            })
        }
    };
    let depth_path = need("depth", "bin", "depth")?;
    let pose_path = need("pose", "txt", "pose")?;
    let calib_path = need("calib", "txt", "calibration")?;

    let depth = decode_depth(&fs::read(&depth_path).map_err(io_err(&depth_path))?, &depth_path)?;
    let pose = decode_pose(
        &fs::read_to_string(&pose_path).map_err(io_err(&pose_path))?,
        index,
        &pose_path,
    )?;
    let intrinsics = decode_calib(&fs::read_to_string(&calib_path).map_err(io_err(&calib_path))?, &calib_path)?;

    let mask_path = root.join("mask").join(frame_file_name(index, "bin"));
    let mask = if mask_path.is_file() {
        let mask = decode_mask(&fs::read(&mask_path).map_err(io_err(&mask_path))?, &mask_path)?;
        if mask.width != depth.width || mask.height != depth.height {
            return Err(IoError::DimensionMismatch {
                frame: index,
                depth_w: depth.width,
                depth_h: depth.height,
                mask_w: mask.width,
                mask_h: mask.height,
            });
        }
        mask
    } else {
        InstanceMaskFrame::empty(depth.width, depth.height)
    };
    Ok(Frame {
        index,
        depth,
        mask,
        intrinsics,
        pose,
    })
}

/// Reads every frame of a sequence directory, sorted by index.
///
/// Masks are optional per frame; depth, pose and calibration are required
/// for every index that appears in any modality.
pub fn read_sequence(dir: impl AsRef<Path>) -> Result<Sequence> {
    let root = dir.as_ref();
    let mut indices = frame_indices(&root.join("depth"), "bin")?;
    indices.extend(frame_indices(&root.join("mask"), "bin")?);
    indices.extend(frame_indices(&root.join("pose"), "txt")?);
    indices.extend(frame_indices(&root.join("calib"), "txt")?);
    let frames = indices
        .into_iter()
        .map(|i| read_frame(root, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Sequence { frames })
}

/// Writes a sequence in the layout [`read_sequence`] expects.
pub fn write_sequence(seq: &Sequence, dir: impl AsRef<Path>) -> Result<()> {
    let root = dir.as_ref();
    for sub in ["depth", "mask", "pose", "calib"] {
        let p = root.join(sub);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    for f in &seq.frames {
        let write = |sub: &str, ext: &str, bytes: &[u8]| -> Result<()> {
            let p = root.join(sub).join(frame_file_name(f.index, ext));
            fs::write(&p, bytes).map_err(io_err(&p))
        };
        write("depth", "bin", &encode_depth(&f.depth))?;
        write("mask", "bin", &encode_mask(&f.mask))?;
        write("pose", "txt", encode_pose(&f.pose).as_bytes())?;
        write("calib", "txt", encode_calib(&f.intrinsics).as_bytes())?;
    }
    Ok(())
}

/// One KITTI-format object label. Location is the bottom-center of the box
/// in camera coordinates and `rotation_y` follows the KITTI convention.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRecord {
    pub class: String,
    pub truncation: f64,
    pub occlusion: u8,
    pub alpha: f64,
    pub bbox: [f64; 4],
    pub h: f64,
    pub w: f64,
    pub l: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub rotation_y: f64,
    pub score: f64,
}

impl LabelRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.class.is_empty() || self.class.contains(char::is_whitespace) {
            return Err(format!("class name {:?} must be a non-empty token", self.class));
        }
        for (name, v) in [("h", self.h), ("w", self.w), ("l", self.l)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(format!("{name} = {v} must be > 0"));
            }
        }
        if !(-std::f64::consts::PI..std::f64::consts::PI).contains(&self.rotation_y) {
            return Err(format!("yaw {} outside [-pi, pi)", self.rotation_y));
        }
        if !(0.0..=1.0).contains(&self.truncation) {
            return Err(format!("truncation {} outside [0,1]", self.truncation));
        }
        if self.occlusion > 3 {
            return Err(format!("occlusion {} outside 0..=3", self.occlusion));
        }
        let numeric = [self.alpha, self.x, self.y, self.z, self.score];
        if numeric.iter().chain(self.bbox.iter()).any(|v| !v.is_finite()) {
            return Err("non-finite numeric field".into());
        }
        Ok(())
    }

    fn to_line(&self) -> String {
        format!(
            "{} {:.2} {} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.4}",
            self.class,
            self.truncation,
            self.occlusion,
            self.alpha,
            self.bbox[0],
            self.bbox[1],
            self.bbox[2],
            self.bbox[3],
            self.h,
            self.w,
            self.l,
            self.x,
            self.y,
            self.z,
            self.rotation_y,
            self.score
        )
    }
}

pub fn format_labels(labels: &[LabelRecord]) -> Result<String> {
    let mut out = String::new();
    for rec in labels {
        rec.validate().map_err(IoError::InvalidLabel)?;
        out.push_str(&rec.to_line());
        out.push('\n');
    }
    Ok(out)
}

/// Writes one label per line. All records are validated before anything is
/// written.
pub fn write_labels(labels: &[LabelRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = format_labels(labels)?;
    fs::write(path, text).map_err(io_err(path))
}

pub fn parse_labels(text: &str, path: &Path) -> Result<Vec<LabelRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let err = |reason: String| IoError::Parse {
            path: path.to_path_buf(),
            line: lineno,
            reason,
        };
        if fields.len() != 15 && fields.len() != 16 {
            return Err(err(format!("expected 15 or 16 fields, found {}", fields.len())));
        }
        if fields[0] == "DontCare" {
            continue;
        }
        let mut nums = [0.0f64; 15];
        for (slot, raw) in nums.iter_mut().zip(&fields[1..]) {
            *slot = raw.parse().map_err(|e| err(format!("field {raw:?}: {e}")))?;
        }
        let occlusion = fields[2]
            .parse::<u8>()
            .map_err(|e| err(format!("occlusion {:?}: {e}", fields[2])))?;
        let rec = LabelRecord {
            class: fields[0].to_string(),
            truncation: nums[0].clamp(0.0, 1.0),
            occlusion,
            alpha: nums[2],
            bbox: [nums[3], nums[4], nums[5], nums[6]],
            h: nums[7],
            w: nums[8],
            l: nums[9],
            x: nums[10],
            y: nums[11],
            z: nums[12],
            rotation_y: wrap_angle(nums[13]),
            score: if fields.len() == 16 { nums[14] } else { 1.0 },
        };
        rec.validate().map_err(err)?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<LabelRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_labels(&text, path)
}

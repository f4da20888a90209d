//! Demonstration episodes: time-aligned frames, termination labels and the
//! on-disk episode directory.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::calib::CalibrationRig;
use crate::cloud::{ColorImage, DepthFrame, Intrinsics, Mask};
use crate::geometry::Pose;

pub const MANIFEST_VERSION: u32 = 1;
/// Number of trailing frames labeled as task completion.
pub const TERMINAL_FRAMES: usize = 5;

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("pose and frame streams do not overlap in time")]
    NoOverlap,
    #[error("{0} stream is empty")]
    EmptyStream(&'static str),
    #[error("{0} stream is not strictly time-sorted")]
    Unsorted(&'static str),
    #[error("episode has {0} frames; at least {min} are required", min = TERMINAL_FRAMES + 1)]
    TooShort(usize),
    #[error("manifest version {found} is incompatible with {expected}")]
    Version { found: u32, expected: u32 },
    #[error("frame {frame}: missing file {path}")]
    MissingFile { frame: usize, path: PathBuf },
    #[error("frame {frame}: {file} holds {got} bytes, expected {expected}")]
    Truncated {
        frame: usize,
        file: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("frame {frame}: checksum mismatch")]
    Checksum { frame: usize },
    #[error("{file}: {msg}")]
    Format { file: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One camera frame as delivered by the depth/segmentation/pose providers,
/// before it is paired with a head pose.
#[derive(Debug, Clone, PartialEq)]
pub struct RawFrame {
    pub timestamp: f64,
    pub depth: DepthFrame,
    pub color: Option<ColorImage>,
    pub hand_mask: Mask,
    pub object_mask: Mask,
    /// Object to camera, when pose estimation succeeded.
    pub object_pose_cam: Option<Pose>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub timestamp: f64,
    pub depth: DepthFrame,
    pub color: Option<ColorImage>,
    pub hand_mask: Mask,
    pub object_mask: Mask,
    /// Glasses pose in the tracking frame.
    pub head_pose: Pose,
    pub object_pose_cam: Option<Pose>,
    pub terminal: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub frames: Vec<FrameRecord>,
    pub rig: CalibrationRig,
    pub intrinsics: Intrinsics,
    pub task_name: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub rig: CalibrationRig,
    pub intrinsics: Intrinsics,
    pub task_name: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aligned {
    pub episode: Episode,
    /// Frames outside the pose stream's time coverage.
    pub dropped: usize,
}

/// Pairs every frame with the head pose interpolated at its timestamp.
pub fn align_streams(
    pose_stream: &[(f64, Pose)],
    frames: Vec<RawFrame>,
    meta: EpisodeMeta,
) -> Result<Aligned, EpisodeError> {
    if pose_stream.is_empty() {
        return Err(EpisodeError::EmptyStream("pose"));
    }
    if frames.is_empty() {
        return Err(EpisodeError::EmptyStream("frame"));
    }
    if pose_stream.windows(2).any(|w| !(w[0].0 < w[1].0)) {
        return Err(EpisodeError::Unsorted("pose"));
    }
    if frames.windows(2).any(|w| !(w[0].timestamp < w[1].timestamp)) {
        return Err(EpisodeError::Unsorted("frame"));
    }
    let mut out = Vec::with_capacity(frames.len());
    let mut dropped = 0;
    let mut j = 0;
    for f in frames {
        let t = f.timestamp;
        let (first, last) = (pose_stream[0].0, pose_stream[pose_stream.len() - 1].0);
        if t < first || t > last {
            dropped += 1;
            continue;
        }
        while j + 1 < pose_stream.len() && pose_stream[j + 1].0 <= t {
            j += 1;
        }
        let (ta, pa) = pose_stream[j];
        let head_pose = if ta == t || j + 1 == pose_stream.len() {
            pa
        } else {
            let (tb, pb) = pose_stream[j + 1];
            pa.interpolate(&pb, (t - ta) / (tb - ta))
                .expect("timestamp lies between samples")
        };
        out.push(FrameRecord {
            timestamp: t,
            depth: f.depth,
            color: f.color,
            hand_mask: f.hand_mask,
            object_mask: f.object_mask,
            head_pose,
            object_pose_cam: f.object_pose_cam,
            terminal: 0,
        });
    }
    if out.is_empty() {
        return Err(EpisodeError::NoOverlap);
    }
    Ok(Aligned {
        episode: Episode {
            frames: out,
            rig: meta.rig,
            intrinsics: meta.intrinsics,
            task_name: meta.task_name,
            seed: meta.seed,
        },
        dropped,
    })
}

/// Marks the last five frames as task completion and every other frame as not.
pub fn label_termination(ep: &Episode) -> Result<Episode, EpisodeError> {
    let n = ep.frames.len();
    if n < TERMINAL_FRAMES + 1 {
        return Err(EpisodeError::TooShort(n));
    }
    let mut out = ep.clone();
    for (i, f) in out.frames.iter_mut().enumerate() {
        f.terminal = u8::from(i >= n - TERMINAL_FRAMES);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

pub fn validate(ep: &Episode) -> ValidationReport {
    let mut checks = Vec::new();
    let mut push = |name: &str, passed: bool, detail: String| {
        checks.push(Check {
            name: name.to_string(),
            passed,
            detail,
        })
    };

    let bad_ts: Vec<usize> = ep
        .frames
        .windows(2)
        .enumerate()
        .filter(|(_, w)| !(w[0].timestamp < w[1].timestamp))
        .map(|(i, _)| i + 1)
        .collect();
    push(
        "timestamps_monotonic",
        bad_ts.is_empty(),
        if bad_ts.is_empty() {
            String::new()
        } else {
            format!("non-increasing at frames {bad_ts:?}")
        },
    );

    let n = ep.frames.len();
    push(
        "frame_count",
        n > TERMINAL_FRAMES,
        format!("{n} frames"),
    );

    let bad_term: Vec<usize> = ep
        .frames
        .iter()
        .enumerate()
        .filter(|(_, f)| f.terminal > 1)
        .map(|(i, _)| i)
        .collect();
    push(
        "terminal_binary",
        bad_term.is_empty(),
        format!("{bad_term:?}"),
    );

    push(
        "rig_non_collinear",
        ep.rig.is_non_collinear(),
        String::new(),
    );

    let intr_ok = ep.intrinsics.validate();
    push(
        "intrinsics",
        intr_ok.is_ok(),
        intr_ok.err().map(|e| e.to_string()).unwrap_or_default(),
    );

    let (w, h) = (ep.intrinsics.width, ep.intrinsics.height);
    let mut bad_dims = Vec::new();
    for (i, f) in ep.frames.iter().enumerate() {
        let dims_ok = f.depth.width == w
            && f.depth.height == h
            && f.depth.data.len() == w * h
            && f.hand_mask.width == w
            && f.hand_mask.height == h
            && f.hand_mask.data.len() == w * h
            && f.object_mask.width == w
            && f.object_mask.height == h
            && f.object_mask.data.len() == w * h
            && f
                .color
                .as_ref()
                .is_none_or(|c| c.width == w && c.height == h && c.data.len() == w * h);
        if !dims_ok {
            bad_dims.push(i);
        }
    }
    push(
        "dimensions",
        bad_dims.is_empty(),
        if bad_dims.is_empty() {
            String::new()
        } else {
            format!("mismatched frames {bad_dims:?}")
        },
    );

    let bad_pose: Vec<usize> = ep
        .frames
        .iter()
        .enumerate()
        .filter(|(_, f)| {
            !f.head_pose.is_finite() || f.object_pose_cam.is_some_and(|p| !p.is_finite())
        })
        .map(|(i, _)| i)
        .collect();
    push("poses_finite", bad_pose.is_empty(), format!("{bad_pose:?}"));

    ValidationReport { checks }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    task: String,
    seed: u64,
    intrinsics: Intrinsics,
    rig: CalibrationRig,
    frame_count: usize,
    /// sha256 over the frame's files in fixed order.
    checksums: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct HeadLine {
    frame: usize,
    timestamp: f64,
    pose: Pose,
    terminal: u8,
}

#[derive(Debug, Serialize, Deserialize)]
struct ObjectLine {
    frame: usize,
    pose: Option<Pose>,
}

const DEPTH_FILE: &str = "depth.f32";
const HAND_FILE: &str = "mask_hand.u8";
const OBJECT_FILE: &str = "mask_object.u8";
const COLOR_FILE: &str = "color.rgb8";

fn frame_dir(dir: &Path, i: usize) -> PathBuf {
    dir.join("frames").join(format!("{i:06}"))
}

fn frame_checksum(depth: &[u8], hand: &[u8], object: &[u8], color: Option<&[u8]>) -> String {
    let mut h = Sha256::new();
    h.update(depth);
    h.update(hand);
    h.update(object);
    if let Some(c) = color {
        h.update(c);
    }
    hex::encode(h.finalize())
}

fn color_bytes(c: &ColorImage) -> Vec<u8> {
    c.data.iter().flat_map(|p| p.iter().copied()).collect()
}

/// Writes the episode directory layout:
/// `manifest.json`, `head_poses.jsonl`, `object_poses.jsonl` and
/// `frames/%06d/{depth.f32, mask_hand.u8, mask_object.u8[, color.rgb8]}`.
pub fn save(ep: &Episode, dir: &Path) -> Result<(), EpisodeError> {
    fs::create_dir_all(dir.join("frames"))?;
    let mut checksums = Vec::with_capacity(ep.frames.len());
    let mut heads = fs::File::create(dir.join("head_poses.jsonl"))?;
    let mut objects = fs::File::create(dir.join("object_poses.jsonl"))?;
    for (i, f) in ep.frames.iter().enumerate() {
        let fd = frame_dir(dir, i);
        fs::create_dir_all(&fd)?;
        let depth = f.depth.to_bytes();
        let hand = f.hand_mask.to_bytes();
        let object = f.object_mask.to_bytes();
        let color = f.color.as_ref().map(color_bytes);
        fs::write(fd.join(DEPTH_FILE), &depth)?;
        fs::write(fd.join(HAND_FILE), &hand)?;
        fs::write(fd.join(OBJECT_FILE), &object)?;
        if let Some(c) = &color {
            fs::write(fd.join(COLOR_FILE), c)?;
        }
        checksums.push(frame_checksum(&depth, &hand, &object, color.as_deref()));
        serde_json::to_writer(
            &mut heads,
            &HeadLine {
                frame: i,
                timestamp: f.timestamp,
                pose: f.head_pose,
                terminal: f.terminal,
            },
        )?;
        heads.write_all(b"\n")?;
        serde_json::to_writer(
            &mut objects,
            &ObjectLine {
                frame: i,
                pose: f.object_pose_cam,
            },
        )?;
        objects.write_all(b"\n")?;
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        task: ep.task_name.clone(),
        seed: ep.seed,
        intrinsics: ep.intrinsics,
        rig: ep.rig,
        frame_count: ep.frames.len(),
        checksums,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, EpisodeError> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| EpisodeError::Format {
            file: path.display().to_string(),
            msg: format!("line {}: {e}", n + 1),
        })?);
    }
    Ok(out)
}

fn read_frame_file(
    fd: &Path,
    frame: usize,
    name: &'static str,
    expected: usize,
) -> Result<Vec<u8>, EpisodeError> {
    let path = fd.join(name);
    if !path.exists() {
        return Err(EpisodeError::MissingFile { frame, path });
    }
    let buf = fs::read(&path)?;
    if buf.len() != expected {
        return Err(EpisodeError::Truncated {
            frame,
            file: name,
            got: buf.len(),
            expected,
        });
    }
    Ok(buf)
}

pub fn load(dir: &Path) -> Result<Episode, EpisodeError> {
    load_inner(dir, false).map(|(ep, _)| ep)
}

/// Like [`load`], but frames whose files are missing, truncated or fail their
/// checksum are skipped and reported by index instead of aborting.
pub fn load_skipping_corrupt(dir: &Path) -> Result<(Episode, Vec<usize>), EpisodeError> {
    load_inner(dir, true)
}

fn load_inner(dir: &Path, skip_corrupt: bool) -> Result<(Episode, Vec<usize>), EpisodeError> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(EpisodeError::MissingFile {
            frame: 0,
            path: manifest_path,
        });
    }
    let raw: serde_json::Value = serde_json::from_slice(&fs::read(&manifest_path)?)?;
    let version = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != MANIFEST_VERSION {
        return Err(EpisodeError::Version {
            found: version,
            expected: MANIFEST_VERSION,
        });
    }
    let manifest: Manifest = serde_json::from_value(raw)?;
    let heads: Vec<HeadLine> = read_jsonl(&dir.join("head_poses.jsonl"))?;
    let objects: Vec<ObjectLine> = read_jsonl(&dir.join("object_poses.jsonl"))?;
    let n = manifest.frame_count;
    if heads.len() != n || objects.len() != n || manifest.checksums.len() != n {
        return Err(EpisodeError::Format {
            file: "manifest.json".into(),
            msg: format!(
                "frame_count {n} but {} head poses, {} object poses, {} checksums",
                heads.len(),
                objects.len(),
                manifest.checksums.len()
            ),
        });
    }
    let (w, h) = (manifest.intrinsics.width, manifest.intrinsics.height);
    let mut frames = Vec::with_capacity(n);
    let mut skipped = Vec::new();
    for i in 0..n {
        if heads[i].frame != i || objects[i].frame != i {
            return Err(EpisodeError::Format {
                file: "head_poses.jsonl".into(),
                msg: format!("record {i} is out of order"),
            });
        }
        let fd = frame_dir(dir, i);
        let files = (|| {
            let depth = read_frame_file(&fd, i, DEPTH_FILE, w * h * 4)?;
            let hand = read_frame_file(&fd, i, HAND_FILE, w * h)?;
            let object = read_frame_file(&fd, i, OBJECT_FILE, w * h)?;
            let color = if fd.join(COLOR_FILE).exists() {
                Some(read_frame_file(&fd, i, COLOR_FILE, w * h * 3)?)
            } else {
                None
            };
            if frame_checksum(&depth, &hand, &object, color.as_deref()) != manifest.checksums[i] {
                return Err(EpisodeError::Checksum { frame: i });
            }
            Ok((depth, hand, object, color))
        })();
        let (depth, hand, object, color) = match files {
            Ok(f) => f,
            Err(
                EpisodeError::Checksum { .. }
                | EpisodeError::Truncated { .. }
                | EpisodeError::MissingFile { .. },
            ) if skip_corrupt => {
                skipped.push(i);
                continue;
            }
            Err(e) => return Err(e),
        };
        let depth = DepthFrame::from_bytes(w, h, &depth).expect("length checked");
        let hand_mask = Mask::from_bytes(w, h, &hand).expect("length checked");
        let object_mask = Mask::from_bytes(w, h, &object).expect("length checked");
        let color = color.map(|c| ColorImage {
            width: w,
            height: h,
            data: c.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect(),
        });
        frames.push(FrameRecord {
            timestamp: heads[i].timestamp,
            depth,
            color,
            hand_mask,
            object_mask,
            head_pose: heads[i].pose,
            object_pose_cam: objects[i].pose,
            terminal: heads[i].terminal,
        });
    }
    let ep = Episode {
        frames,
        rig: manifest.rig,
        intrinsics: manifest.intrinsics,
        task_name: manifest.task,
        seed: manifest.seed,
    };
    Ok((ep, skipped))
}

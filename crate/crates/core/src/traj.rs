//! Trajectory representations: world-frame object trajectories, head motion
//! relative to the current head pose, and object-to-end-effector retargeting.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::episode::Episode;
use crate::geometry::Pose;

/// Default number of future steps predicted per window.
pub const DEFAULT_HORIZON: usize = 16;
/// Longest run of frames without an object pose that is filled by interpolation.
pub const MAX_FILL_GAP: usize = 2;

#[derive(Debug, Error)]
pub enum TrajError {
    #[error("trajectory is empty")]
    Empty,
    #[error("{len} consecutive frames without object pose starting at frame {start}")]
    Gap { start: usize, len: usize },
    #[error("{frames} frames but {anchors} camera-to-world poses")]
    AnchorCount { frames: usize, anchors: usize },
    #[error("window start {t} is past the last index {last}")]
    WindowStart { t: usize, last: usize },
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Future object poses in the world frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectTrajAbs {
    pub poses: Vec<Pose>,
}

/// Future head poses, each expressed relative to the current head pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadTrajRel {
    pub deltas: Vec<Pose>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspTransform {
    /// End-effector pose in the object frame.
    pub obj_to_ee: Pose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectTrack {
    /// Object to world, one per frame.
    pub poses: Vec<Pose>,
    /// Frames whose pose was filled in rather than observed.
    pub filled: Vec<usize>,
}

/// Lifts per-frame camera-frame object poses into the world frame. Runs of up
/// to two missing poses are interpolated (or held at the episode ends).
pub fn extract_object_traj(ep: &Episode, cam_to_world: &[Pose]) -> Result<ObjectTrack, TrajError> {
    let n = ep.frames.len();
    if n == 0 {
        return Err(TrajError::Empty);
    }
    if cam_to_world.len() != n {
        return Err(TrajError::AnchorCount {
            frames: n,
            anchors: cam_to_world.len(),
        });
    }
    let observed: Vec<Option<Pose>> = ep
        .frames
        .iter()
        .zip(cam_to_world)
        .map(|(f, c)| f.object_pose_cam.map(|p| c.compose(&p)))
        .collect();
    let times: Vec<f64> = ep.frames.iter().map(|f| f.timestamp).collect();
    fill_gaps(&observed, &times)
}

fn fill_gaps(observed: &[Option<Pose>], times: &[f64]) -> Result<ObjectTrack, TrajError> {
    let n = observed.len();
    let mut poses = Vec::with_capacity(n);
    let mut filled = Vec::new();
    let mut i = 0;
    while i < n {
        if let Some(p) = observed[i] {
            poses.push(p);
            i += 1;
            continue;
        }
        let start = i;
        while i < n && observed[i].is_none() {
            i += 1;
        }
        let len = i - start;
        if len > MAX_FILL_GAP || len == n {
            return Err(TrajError::Gap { start, len });
        }
        let before = start.checked_sub(1).map(|k| (times[k], observed[k].expect("observed")));
        let after = (i < n).then(|| (times[i], observed[i].expect("observed")));
        for k in start..i {
            let p = match (before, after) {
                (Some((ta, a)), Some((tb, b))) => a
                    .interpolate(&b, ((times[k] - ta) / (tb - ta)).clamp(0.0, 1.0))
                    .expect("parameter clamped"),
                (Some((_, a)), None) => a,
                (None, Some((_, b))) => b,
                (None, None) => unreachable!("gap shorter than the episode"),
            };
            poses.push(p);
            filled.push(k);
        }
    }
    Ok(ObjectTrack { poses, filled })
}

fn window_indices(len: usize, t: usize, horizon: usize) -> Result<impl Iterator<Item = usize>, TrajError> {
    if len == 0 {
        return Err(TrajError::Empty);
    }
    if t >= len {
        return Err(TrajError::WindowStart { t, last: len - 1 });
    }
    Ok((1..=horizon).map(move |k| (t + k).min(len - 1)))
}

/// Head poses at `t+1 ..= t+horizon` relative to the head pose at `t`; windows
/// running past the end repeat the final pose.
pub fn relative_head_window(head: &[Pose], t: usize, horizon: usize) -> Result<HeadTrajRel, TrajError> {
    let idx = window_indices(head.len(), t, horizon)?;
    Ok(HeadTrajRel {
        deltas: idx.map(|j| head[t].relative(&head[j])).collect(),
    })
}

/// Object poses at `t+1 ..= t+horizon`, padded with the final pose.
pub fn object_window(poses: &[Pose], t: usize, horizon: usize) -> Result<ObjectTrajAbs, TrajError> {
    let idx = window_indices(poses.len(), t, horizon)?;
    Ok(ObjectTrajAbs {
        poses: idx.map(|j| poses[j]).collect(),
    })
}

pub fn rel_to_abs(base: &Pose, rel: &HeadTrajRel) -> Vec<Pose> {
    rel.deltas.iter().map(|d| base.compose(d)).collect()
}

pub fn abs_to_rel(base: &Pose, abs: &[Pose]) -> HeadTrajRel {
    HeadTrajRel {
        deltas: abs.iter().map(|p| base.relative(p)).collect(),
    }
}

pub fn compute_grasp_transform(ee_pose_world: &Pose, obj_pose_world: &Pose) -> GraspTransform {
    GraspTransform {
        obj_to_ee: obj_pose_world.relative(ee_pose_world),
    }
}

/// End-effector targets that carry a rigidly grasped object along `obj_poses`.
pub fn retarget(obj_poses: &[Pose], g: &GraspTransform) -> Vec<Pose> {
    obj_poses.iter().map(|p| p.compose(&g.obj_to_ee)).collect()
}

/// One supervised example: the observation at a frame and the targets that follow it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    /// Path of the world-frame cloud, relative to the dataset root.
    pub cloud_ref: String,
    pub obj_abs: Vec<Pose>,
    pub head_rel: Vec<Pose>,
    pub terminal: u8,
    pub current_obj_pose: Pose,
}

/// Builds one sample per frame from world object poses and head poses.
pub fn build_samples(
    object_world: &[Pose],
    head: &[Pose],
    terminal: &[u8],
    horizon: usize,
    mut cloud_ref: impl FnMut(usize) -> String,
) -> Result<Vec<TrainingSample>, TrajError> {
    let n = object_world.len();
    if n == 0 {
        return Err(TrajError::Empty);
    }
    if head.len() != n || terminal.len() != n {
        return Err(TrajError::AnchorCount {
            frames: n,
            anchors: head.len().min(terminal.len()),
        });
    }
    (0..n)
        .map(|t| {
            Ok(TrainingSample {
                cloud_ref: cloud_ref(t),
                obj_abs: object_window(object_world, t, horizon)?.poses,
                head_rel: relative_head_window(head, t, horizon)?.deltas,
                terminal: terminal[t],
                current_obj_pose: object_world[t],
            })
        })
        .collect()
}

pub fn write_samples<W: Write>(mut w: W, samples: &[TrainingSample]) -> Result<(), TrajError> {
    for s in samples {
        serde_json::to_writer(&mut w, s).map_err(|source| TrajError::Json { line: 0, source })?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_samples<R: BufRead>(r: R) -> Result<Vec<TrainingSample>, TrajError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| TrajError::Json { line: i + 1, source })?);
    }
    Ok(out)
}

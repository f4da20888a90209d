//! Demonstration processing: episode frames to world-frame clouds, object
//! tracks and training samples on disk.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calib::{propagate_cam_to_world, world_frame_from_spheres, CalibError};
use crate::cloud::{backproject, crop_workspace, read_ply, remove_masked, write_ply, Aabb, CloudError, FrameTag, LabeledCloud};
use crate::episode::{self, align_streams, label_termination, Episode, EpisodeError, EpisodeMeta};
use crate::geometry::Pose;
use crate::policy::{prepare_sample, PolicyConfig, PolicyError, PreparedSample};
use crate::simworld::{
    default_intrinsics, generate_demo, randomize_scene, DemoScript, DemoStreams, RandomizationRanges, SceneSpec, SimError,
    StreamRates,
};
use crate::traj::{build_samples, extract_object_traj, read_samples, write_samples, TrainingSample, TrajError, DEFAULT_HORIZON};

pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const CLOUD_DIR: &str = "clouds";

#[derive(Debug, Error)]
pub enum ProcessError {
    #[error("episode `{episode}`: calibration failed: {source}")]
    Calibration { episode: String, source: CalibError },
    #[error("episode `{episode}`: {source}")]
    Episode { episode: String, source: EpisodeError },
    #[error("episode `{episode}`: {source}")]
    Traj { episode: String, source: TrajError },
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Samples(#[from] TrajError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ProcessError + '_ {
    move |source| ProcessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProcessConfig {
    /// World-frame crop; the default floor sits just above the table top.
    pub crop: Aabb,
    pub horizon: usize,
}

impl Default for ProcessConfig {
    fn default() -> Self {
        Self {
            crop: Aabb {
                min: [-0.15, -0.15, -0.02],
                max: [0.9, 0.9, 0.7],
            },
            horizon: DEFAULT_HORIZON,
        }
    }
}

/// Aligns the frame and head-pose streams and labels termination.
pub fn episode_from_demo(streams: &DemoStreams, task_name: &str, seed: u64) -> Result<Episode, EpisodeError> {
    let meta = EpisodeMeta {
        rig: streams.rig,
        intrinsics: streams.intrinsics,
        task_name: task_name.to_string(),
        seed,
    };
    let aligned = align_streams(&streams.head_poses, streams.frames.clone(), meta)?;
    label_termination(&aligned.episode)
}

/// Camera-to-world pose of every frame: sphere anchor on the first frame,
/// head-pose propagation after.
pub fn calibrate_episode(ep: &Episode) -> Result<Vec<Pose>, CalibError> {
    let [b0, b1, b2] = ep.rig.sphere_centers_cam0;
    let anchor = world_frame_from_spheres(&b0, &b1, &b2)?;
    let head0 = ep.frames.first().map(|f| f.head_pose).unwrap_or_else(Pose::identity);
    Ok(ep
        .frames
        .iter()
        .map(|f| propagate_cam_to_world(&anchor, &head0, &f.head_pose, &ep.rig.glass_to_cam))
        .collect())
}

/// Back-projects one frame with color, removes the hand, lifts to the world and crops.
pub fn frame_world_cloud(ep: &Episode, index: usize, cam_to_world: &Pose, crop: &Aabb) -> Result<LabeledCloud, CloudError> {
    let f = &ep.frames[index];
    let cam = backproject(&f.depth, &ep.intrinsics, f.color.as_ref())?;
    let pixels = cam.pixel_index.clone().unwrap_or_default();
    let cam = remove_masked(&cam, &f.hand_mask, &pixels)?;
    let world = cam.transformed(cam_to_world, FrameTag::World);
    crop_workspace(&world, crop)
}

#[derive(Debug, Clone)]
pub struct ProcessedEpisode {
    pub cam_to_world: Vec<Pose>,
    pub object_world: Vec<Pose>,
    /// Frames whose object pose was interpolated.
    pub filled: Vec<usize>,
    pub clouds: Vec<LabeledCloud>,
    pub samples: Vec<TrainingSample>,
}

/// Full per-episode processing. `cloud_ref` names the cloud of frame `i`.
pub fn process_episode(
    ep: &Episode,
    id: &str,
    cfg: &ProcessConfig,
    cloud_ref: impl FnMut(usize) -> String,
) -> Result<ProcessedEpisode, ProcessError> {
    let cam_to_world = calibrate_episode(ep).map_err(|source| ProcessError::Calibration {
        episode: id.to_string(),
        source,
    })?;
    let clouds = (0..ep.frames.len())
        .map(|i| frame_world_cloud(ep, i, &cam_to_world[i], &cfg.crop))
        .collect::<Result<Vec<_>, _>>()?;
    let traj_err = |source| ProcessError::Traj {
        episode: id.to_string(),
        source,
    };
    let track = extract_object_traj(ep, &cam_to_world).map_err(traj_err)?;
    let head: Vec<Pose> = ep.frames.iter().map(|f| f.head_pose).collect();
    let terminal: Vec<u8> = ep.frames.iter().map(|f| f.terminal).collect();
    let samples = build_samples(&track.poses, &head, &terminal, cfg.horizon, cloud_ref).map_err(traj_err)?;
    Ok(ProcessedEpisode {
        cam_to_world,
        object_world: track.poses,
        filled: track.filled,
        clouds,
        samples,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub id: String,
    pub frames: usize,
    /// Indices (in the stored episode) of frames skipped as corrupt.
    pub dropped: Vec<usize>,
    /// Frames whose object pose was interpolated.
    pub filled: Vec<usize>,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessReport {
    pub episodes: Vec<EpisodeReport>,
    pub total_samples: usize,
    pub total_dropped: usize,
}

/// Processes stored episodes into `out`: `samples.jsonl`, `clouds/*.ply` and `report.json`.
pub fn process_dataset(episode_dirs: &[PathBuf], out: &Path, cfg: &ProcessConfig) -> Result<ProcessReport, ProcessError> {
    let cloud_dir = out.join(CLOUD_DIR);
    fs::create_dir_all(&cloud_dir).map_err(io_err(&cloud_dir))?;
    let mut all = Vec::new();
    let mut reports = Vec::new();
    for dir in episode_dirs {
        let id = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        let (ep, dropped) = episode::load_skipping_corrupt(dir).map_err(|source| ProcessError::Episode {
            episode: id.clone(),
            source,
        })?;
        let processed = process_episode(&ep, &id, cfg, |i| format!("{CLOUD_DIR}/{id}_{i:04}.ply"))?;
        for (s, cloud) in processed.samples.iter().zip(&processed.clouds) {
            let path = out.join(&s.cloud_ref);
            let f = File::create(&path).map_err(io_err(&path))?;
            write_ply(BufWriter::new(f), cloud)?;
        }
        reports.push(EpisodeReport {
            id,
            frames: ep.frames.len(),
            dropped,
            filled: processed.filled,
            samples: processed.samples.len(),
        });
        all.extend(processed.samples);
    }
    let path = out.join(SAMPLES_FILE);
    let f = File::create(&path).map_err(io_err(&path))?;
    write_samples(BufWriter::new(f), &all)?;
    let report = ProcessReport {
        total_samples: all.len(),
        total_dropped: reports.iter().map(|r| r.dropped.len()).sum(),
        episodes: reports,
    };
    let path = out.join(REPORT_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&report)?).map_err(io_err(&path))?;
    Ok(report)
}

pub fn read_dataset_samples(dir: &Path) -> Result<Vec<TrainingSample>, ProcessError> {
    let path = dir.join(SAMPLES_FILE);
    let f = File::open(&path).map_err(io_err(&path))?;
    Ok(read_samples(BufReader::new(f))?)
}

/// Loads a processed dataset and prepares every sample for `cfg`.
pub fn load_prepared(dir: &Path, cfg: &PolicyConfig) -> Result<Vec<PreparedSample>, ProcessError> {
    read_dataset_samples(dir)?
        .iter()
        .map(|s| {
            let path = dir.join(&s.cloud_ref);
            let f = File::open(&path).map_err(io_err(&path))?;
            let cloud = read_ply(BufReader::new(f), FrameTag::World)?;
            Ok(prepare_sample(s, &cloud, cfg)?)
        })
        .collect()
}

/// Prepares in-memory processed episodes without touching disk.
pub fn prepare_processed(episodes: &[ProcessedEpisode], cfg: &PolicyConfig) -> Result<Vec<PreparedSample>, PolicyError> {
    episodes
        .iter()
        .flat_map(|e| e.samples.iter().zip(&e.clouds))
        .map(|(s, c)| prepare_sample(s, c, cfg))
        .collect()
}

/// Seed of demonstration `index`, on a stream disjoint from rollout seeds.
pub fn demo_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((1 << 32) + index as u64);
    rng.next_u64()
}

/// Demonstration `index` of a synthetic dataset: the base scene randomized
/// and a scripted demo generated on it, both from [`demo_seed`].
pub fn synthetic_demo(
    base: &SceneSpec,
    script: &DemoScript,
    ranges: &RandomizationRanges,
    seed: u64,
    index: usize,
) -> Result<(SceneSpec, DemoStreams), SimError> {
    let s = demo_seed(seed, index);
    let scene = randomize_scene(base, ranges, s)?;
    let streams = generate_demo(&scene, script, &StreamRates::default(), &default_intrinsics(), s)?;
    Ok((scene, streams))
}

/// `n` synthetic demonstrations processed in memory.
pub fn synthetic_dataset(
    base: &SceneSpec,
    script: &DemoScript,
    ranges: &RandomizationRanges,
    n: usize,
    seed: u64,
    cfg: &ProcessConfig,
) -> Result<Vec<ProcessedEpisode>, ProcessError> {
    (0..n)
        .map(|i| {
            let (scene, streams) = synthetic_demo(base, script, ranges, seed, i)?;
            let id = format!("demo_{i:04}");
            let ep = episode_from_demo(&streams, scene.task.name(), demo_seed(seed, i)).map_err(|source| ProcessError::Episode {
                episode: id.clone(),
                source,
            })?;
            process_episode(&ep, &id, cfg, |f| format!("{CLOUD_DIR}/{id}_{f:04}.ply"))
        })
        .collect()
}

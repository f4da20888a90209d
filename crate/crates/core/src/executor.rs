//! Closed-loop execution against the simulator: observe, calibrate, infer,
//! move both arms, repeat; plus per-task stage predicates and a benchmark
//! harness that tallies them.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arms::{fk, follow_trajectory, ik_dls, ArmModel, FollowConfig, IkConfig, IkFailureReason, JointConfig};
use crate::calib::{propagate_cam_to_world, sphere_centers_from_masks, world_frame_from_spheres, CalibError, WorldAnchor};
use crate::cloud::{backproject, crop_workspace, remove_masked, write_ply, Aabb, CloudError, FrameTag, LabeledCloud};
use crate::geometry::{Pose, Vec3};
use crate::policy::{predict, ObjectRep, PolicyError, PolicyOutput, PolicyParams};
use crate::simworld::{
    default_glass_to_cam, default_intrinsics, hand_primitive, oracle_object_pose, randomize_scene, render_view, DemoPlan, DemoScript,
    PoseNoise, Primitive, RandomizationRanges, SceneSpec, SimError, TaskKind, HAND_ID, SPHERE_IDS,
};
use crate::traj::{retarget, GraspTransform, HeadTrajRel, DEFAULT_HORIZON};

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("calibration at the first step failed: {0}")]
    Calibration(#[from] CalibError),
    #[error("invalid rollout config: {0}")]
    Config(String),
    #[error("initial {arm:?} arm pose is not reachable: {reason:?}")]
    Setup { arm: ArmRole, reason: IkFailureReason },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArmRole {
    Manipulation,
    Perception,
}

/// Uniform half-widths of the perception-arm base perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseJitter {
    pub translation: f64,
    pub yaw: f64,
}

impl Default for BaseJitter {
    fn default() -> Self {
        Self {
            translation: 0.03,
            yaw: 5f64.to_radians(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutConfig {
    /// Observe-infer-execute cycles before giving up.
    pub max_steps: usize,
    pub threshold: f64,
    /// Waypoints of each predicted chunk executed before re-observing.
    pub execute_steps: usize,
    /// Horizon of scripted policies (trained policies use their own).
    pub horizon: usize,
    /// Time between executed waypoints, seconds.
    pub control_dt: f64,
    pub base_jitter: BaseJitter,
    /// Keep the perception arm still (no active vision).
    pub fixed_camera: bool,
    pub crop: Aabb,
    pub follow: FollowConfig,
    pub seed: u64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            max_steps: 12,
            threshold: 0.5,
            execute_steps: 8,
            horizon: DEFAULT_HORIZON,
            control_dt: 0.1,
            base_jitter: BaseJitter::default(),
            fixed_camera: false,
            crop: crate::pipeline::ProcessConfig::default().crop,
            follow: FollowConfig {
                max_step: 0.35,
                ..FollowConfig::default()
            },
            seed: 0,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self, horizon: usize) -> Result<(), ExecError> {
        if self.execute_steps < 1 || self.execute_steps > horizon {
            return Err(ExecError::Config(format!(
                "executed steps {} must lie in 1..={horizon}",
                self.execute_steps
            )));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(ExecError::Config("threshold must lie in [0, 1]".into()));
        }
        if self.max_steps < 1 || !(self.control_dt > 0.0) {
            return Err(ExecError::Config("max_steps and control_dt must be positive".into()));
        }
        Ok(())
    }
}

/// Manipulation and perception arms placed around the table.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmPair {
    pub manip: ArmModel,
    pub percep: ArmModel,
}

impl ArmPair {
    /// Places `manip` across the table from the scene and `percep` near the
    /// demonstrator's side.
    pub fn new(manip: &ArmModel, percep: &ArmModel) -> ArmPair {
        ArmPair {
            manip: manip.with_base(manipulation_base()),
            percep: percep.with_base(perception_base()),
        }
    }
}

pub fn manipulation_base() -> Pose {
    Pose::from_axis_angle(&Vec3::z(), std::f64::consts::PI, Vec3::new(0.75, 0.15, -0.03))
}

/// Off the table corner facing the scene, keeping the wrist well away from
/// its singularity along the demonstrated camera paths.
pub fn perception_base() -> Pose {
    Pose::from_axis_angle(&Vec3::z(), std::f64::consts::FRAC_PI_4, Vec3::new(-0.25, -0.35, -0.03))
}

/// Slot: gripper above the top face pointing down. Pour: gripper from the
/// side facing the manipulation arm, pointing at the bottle axis.
pub fn fixed_grasp(scene: &SceneSpec) -> GraspTransform {
    let corners = scene.manipulated_object().shape.local_corners();
    let max = |k: usize| corners.iter().map(|c| c[k]).fold(f64::NEG_INFINITY, f64::max);
    let obj_to_ee = match scene.task {
        TaskKind::SlotInsertion => {
            Pose::from_axis_angle(&Vec3::x(), std::f64::consts::PI, Vec3::new(0.0, 0.0, max(2) + 0.01))
        }
        TaskKind::Pour => {
            Pose::from_axis_angle(&Vec3::y(), -std::f64::consts::FRAC_PI_2, Vec3::new(max(0) + 0.01, 0.0, 0.0))
        }
    };
    GraspTransform { obj_to_ee }
}

/// Where the policy's trajectories come from.
#[derive(Debug, Clone)]
pub enum RolloutPolicy<'a> {
    Trained(&'a PolicyParams),
    /// Replays the demonstration plan of the scene being run.
    Oracle { script: DemoScript },
    /// Replays the plan of a fixed nominal scene, ignoring the actual one.
    Frozen { scene: SceneSpec, script: DemoScript },
    /// The same output at every step.
    Fixed(PolicyOutput),
}

impl RolloutPolicy<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            RolloutPolicy::Trained(_) => "trained",
            RolloutPolicy::Oracle { .. } => "oracle",
            RolloutPolicy::Frozen { .. } => "frozen",
            RolloutPolicy::Fixed(_) => "fixed",
        }
    }
}

/// Predicts from a demonstration plan at time `t`; terminal in the last half second.
fn scripted_output(plan: &DemoPlan, t: f64, horizon: usize, dt: f64) -> PolicyOutput {
    let g = default_glass_to_cam();
    let head = |t: f64| plan.camera_at(t).compose(&g);
    let h0 = head(t);
    let steps: Vec<f64> = (1..=horizon).map(|k| t + k as f64 * dt).collect();
    PolicyOutput {
        obj_traj: steps.iter().map(|&s| plan.object_at(s)).collect(),
        object_rep: ObjectRep::Absolute,
        head_traj: HeadTrajRel {
            deltas: steps.iter().map(|&s| h0.relative(&head(s))).collect(),
        },
        terminal_score: if t >= plan.duration() - 0.5 { 1.0 } else { 0.0 },
        subsample_seed: 0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum Termination {
    Flag { step: usize },
    MaxSteps,
    IkFailure {
        step: usize,
        arm: ArmRole,
        /// Waypoint within the executed chunk.
        index: usize,
        ik_reason: IkFailureReason,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageFlags {
    pub stage1: bool,
    pub stage2: bool,
    pub stage3: bool,
}

impl StageFlags {
    pub fn is_monotone(&self) -> bool {
        (!self.stage3 || self.stage2) && (!self.stage2 || self.stage1)
    }

    fn monotone(s1: bool, s2: bool, s3: bool) -> StageFlags {
        let stage1 = s1;
        let stage2 = stage1 && s2;
        StageFlags {
            stage1,
            stage2,
            stage3: stage2 && s3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub cloud_points: usize,
    pub cam_to_world: Pose,
    pub camera_true: Pose,
    pub object_estimate: Pose,
    pub object_true: Pose,
    pub output: PolicyOutput,
    pub executed: usize,
    pub manip_q: JointConfig,
    pub percep_q: JointConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutResult {
    pub policy: String,
    pub task: TaskKind,
    pub steps: Vec<StepLog>,
    /// True object pose at the start and after every executed waypoint.
    pub object_path: Vec<Pose>,
    pub stages: StageFlags,
    pub termination: Termination,
    /// World-frame cloud observed at each step.
    #[serde(skip)]
    pub clouds: Vec<LabeledCloud>,
}

impl RolloutResult {
    pub fn outputs(&self) -> impl Iterator<Item = &PolicyOutput> {
        self.steps.iter().map(|s| &s.output)
    }
}

struct Observation {
    cloud: LabeledCloud,
    object_cam: Pose,
}

/// Renders the scene with the gripper proxy at the held object, then masks
/// the proxy out exactly as demonstration frames mask the hand.
fn observe(
    scene: &SceneSpec,
    gripper: &Primitive,
    camera: &Pose,
    cam_to_world: &Pose,
    crop: &Aabb,
) -> Result<Observation, ExecError> {
    let intr = default_intrinsics();
    let mut prims = scene.all_primitives();
    prims.push(gripper.clone());
    let view = render_view(&prims, camera, &intr);
    let cam = backproject(&view.depth, &intr, Some(&view.color))?;
    let pixels = cam.pixel_index.clone().unwrap_or_default();
    let cam = remove_masked(&cam, &view.mask_of(HAND_ID), &pixels)?;
    let cloud = crop_workspace(&cam.transformed(cam_to_world, FrameTag::World), crop)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let object_cam = oracle_object_pose(scene, camera, &scene.manipulated, &PoseNoise::default(), &mut rng)?;
    Ok(Observation { cloud, object_cam })
}

fn calibrate(scene: &SceneSpec, camera: &Pose) -> Result<WorldAnchor, ExecError> {
    let intr = default_intrinsics();
    let view = render_view(&scene.all_primitives(), camera, &intr);
    let masks = SPHERE_IDS.map(|id| view.mask_of(id));
    let [b0, b1, b2] = sphere_centers_from_masks(
        &view.depth,
        [&masks[0], &masks[1], &masks[2]],
        &intr,
        scene.calib_spheres[0].radius,
    )?;
    Ok(world_frame_from_spheres(&b0, &b1, &b2)?)
}

fn jittered(base: &Pose, jitter: &BaseJitter, rng: &mut ChaCha8Rng) -> Pose {
    let mut u = |h: f64| if h > 0.0 { rng.random_range(-h..=h) } else { 0.0 };
    let dt = Vec3::new(u(jitter.translation), u(jitter.translation), 0.0);
    let yaw = u(jitter.yaw);
    Pose::from_translation(dt).compose(base).compose(&Pose::from_axis_angle(&Vec3::z(), yaw, Vec3::zeros()))
}

/// Initial glasses pose of the demonstrations, as the perception arm's start.
pub fn initial_head_pose(script: &DemoScript) -> Pose {
    Pose::look_at(
        &Vec3::from(script.initial_eye),
        &Vec3::from(script.initial_focus),
        &Vec3::z(),
    )
    .compose(&default_glass_to_cam())
}

fn solve_start(arm: &ArmModel, target: &Pose, role: ArmRole) -> Result<JointConfig, ExecError> {
    let cfg = IkConfig::default();
    ik_dls(arm, target, &arm.home_q, &cfg)
        .map(|s| s.q)
        .map_err(|f| ExecError::Setup { arm: role, reason: f.reason })
}

pub fn default_script(task: TaskKind) -> DemoScript {
    match task {
        TaskKind::SlotInsertion => DemoScript::slot_insertion_default(),
        TaskKind::Pour => DemoScript::pour_default(),
    }
}

/// One closed-loop episode. The perception arm starts at the demonstrations'
/// initial viewpoint expressed in its nominal base frame, so base jitter moves
/// the camera; the first step recovers the world frame from the spheres and
/// later steps propagate it with the arm's own end-effector motion.
pub fn run_rollout(
    scene: &SceneSpec,
    policy: &RolloutPolicy,
    cfg: &RolloutConfig,
    arms: &ArmPair,
) -> Result<RolloutResult, ExecError> {
    scene.validate()?;
    let horizon = match policy {
        RolloutPolicy::Trained(p) => p.cfg.horizon,
        RolloutPolicy::Fixed(o) => o.obj_traj.len(),
        _ => cfg.horizon,
    };
    cfg.validate(horizon)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let percep = arms.percep.with_base(jittered(&arms.percep.base_pose_world, &cfg.base_jitter, &mut rng));
    let manip = &arms.manip;
    let glass_to_cam = default_glass_to_cam();
    let cam_to_glass = glass_to_cam.inverse();
    let script = default_script(scene.task);
    let plan = match policy {
        RolloutPolicy::Oracle { script } => Some(DemoPlan::new(scene, script, Vec3::zeros())?),
        RolloutPolicy::Frozen { scene: s, script } => Some(DemoPlan::new(s, script, Vec3::zeros())?),
        _ => None,
    };

    let head_in_base = arms.percep.base_pose_world.relative(&initial_head_pose(&script));
    let mut q_p = solve_start(&percep, &percep.base_pose_world.compose(&head_in_base), ArmRole::Perception)?;
    let grasp = fixed_grasp(scene);
    let mut object = scene.manipulated_object().pose;
    let mut q_m = solve_start(manip, &retarget(&[object], &grasp)[0], ArmRole::Manipulation)?;

    let mut world = scene.clone();
    let mut anchor = None;
    let mut head0 = Pose::identity();
    let mut steps = Vec::new();
    let mut clouds = Vec::new();
    let mut path = vec![object];
    let mut termination = Termination::MaxSteps;

    'outer: for step in 0..cfg.max_steps {
        let ee_world = fk(&percep, &q_p);
        let camera = ee_world.compose(&cam_to_glass);
        // the arm reports its end effector in its own base frame
        let head = percep.base_pose_world.relative(&ee_world);
        let anchor = match anchor {
            Some(a) => a,
            None => {
                head0 = head;
                *anchor.insert(calibrate(&world, &camera)?)
            }
        };
        let cam_to_world = propagate_cam_to_world(&anchor, &head0, &head, &glass_to_cam);
        let obs = observe(&world, &hand_primitive(&script, &object), &camera, &cam_to_world, &cfg.crop)?;
        let object_estimate = cam_to_world.compose(&obs.object_cam);
        let output = match policy {
            RolloutPolicy::Trained(p) => predict(p, &obs.cloud, Some(&object_estimate))?,
            RolloutPolicy::Fixed(o) => o.clone(),
            _ => scripted_output(
                plan.as_ref().expect("scripted policies have a plan"),
                (step * cfg.execute_steps) as f64 * cfg.control_dt,
                horizon,
                cfg.control_dt,
            ),
        };
        let mut log = StepLog {
            step,
            cloud_points: obs.cloud.len(),
            cam_to_world,
            camera_true: camera,
            object_estimate,
            object_true: object,
            output: output.clone(),
            executed: 0,
            manip_q: q_m,
            percep_q: q_p,
        };
        clouds.push(obs.cloud);
        if output.terminal_score > cfg.threshold {
            steps.push(log);
            termination = Termination::Flag { step };
            break;
        }
        let n = cfg.execute_steps.min(output.obj_traj.len());
        let obj_world = output.object_world(Some(&object_estimate))?;
        let ee_targets = retarget(&obj_world[..n], &grasp);
        match follow_trajectory(manip, &ee_targets, &q_m, &cfg.follow) {
            Ok(qs) => {
                q_m = *qs.last().expect("non-empty chunk");
                path.extend_from_slice(&obj_world[..n]);
                object = obj_world[n - 1];
            }
            Err((done, fail)) => {
                if let Some(q) = done.last() {
                    q_m = *q;
                    path.extend_from_slice(&obj_world[..done.len()]);
                }
                log.executed = done.len();
                log.manip_q = q_m;
                steps.push(log);
                termination = Termination::IkFailure {
                    step,
                    arm: ArmRole::Manipulation,
                    index: fail.index,
                    ik_reason: fail.reason,
                };
                break 'outer;
            }
        }
        world = world.with_object_pose(&scene.manipulated, object)?;
        if !cfg.fixed_camera {
            let targets: Vec<Pose> = output.head_traj.deltas[..n].iter().map(|d| ee_world.compose(d)).collect();
            match follow_trajectory(&percep, &targets, &q_p, &cfg.follow) {
                Ok(qs) => q_p = *qs.last().expect("non-empty chunk"),
                Err((done, fail)) => {
                    if let Some(q) = done.last() {
                        q_p = *q;
                    }
                    log.executed = n;
                    log.manip_q = q_m;
                    log.percep_q = q_p;
                    steps.push(log);
                    termination = Termination::IkFailure {
                        step,
                        arm: ArmRole::Perception,
                        index: fail.index,
                        ik_reason: fail.reason,
                    };
                    break 'outer;
                }
            }
        }
        log.executed = n;
        log.manip_q = q_m;
        log.percep_q = q_p;
        steps.push(log);
    }

    let task = TaskSpec::from_scene(scene);
    let stages = evaluate_stages(&path, &task);
    Ok(RolloutResult {
        policy: policy.name().into(),
        task: scene.task,
        steps,
        object_path: path,
        stages,
        termination,
        clouds,
    })
}

/// Geometry the stage predicates need.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub target: Pose,
    pub object: Primitive,
    /// Non-support occluders.
    pub obstacles: Vec<Primitive>,
}

impl TaskSpec {
    pub fn from_scene(scene: &SceneSpec) -> TaskSpec {
        TaskSpec {
            kind: scene.task,
            target: scene.target,
            object: scene.manipulated_object().clone(),
            obstacles: scene
                .occluders
                .iter()
                .filter(|o| !scene.supports.contains(&o.id))
                .cloned()
                .collect(),
        }
    }
}

pub fn parse_task(name: &str) -> Result<TaskKind, ExecError> {
    match name {
        "slot" | "slot_insertion" | "book" => Ok(TaskKind::SlotInsertion),
        "pour" => Ok(TaskKind::Pour),
        other => Err(ExecError::UnknownTask(other.to_string())),
    }
}

pub const APPROACH_RADIUS: f64 = 0.10;
pub const ALIGN_TOLERANCE: f64 = 0.02;
pub const ALIGN_ANGLE_DEG: f64 = 10.0;
pub const FINAL_TOLERANCE: f64 = 0.005;
pub const FINAL_ANGLE_DEG: f64 = 5.0;
pub const POUR_RADIUS: f64 = 0.03;
pub const POUR_TILT_DEG: f64 = 60.0;
pub const POUR_HOLD: usize = 5;
pub const PENETRATION_SLACK: f64 = 5e-4;
const PENETRATION_SAMPLES: usize = 16;

/// Sixteen surface points of the object in its own frame.
fn object_samples(object: &Primitive) -> Vec<Vec3> {
    let local = Primitive {
        pose: Pose::identity(),
        ..object.clone()
    };
    let all = local.surface_points(0.01);
    (0..PENETRATION_SAMPLES).map(|i| all[i * all.len() / PENETRATION_SAMPLES]).collect()
}

/// First path index at which an object sample sits inside an obstacle.
pub fn first_penetration(path: &[Pose], task: &TaskSpec) -> Option<usize> {
    let samples = object_samples(&task.object);
    path.iter().position(|p| {
        samples.iter().any(|s| {
            let w = p.apply(s);
            task.obstacles.iter().any(|o| o.inside_depth(&w) > PENETRATION_SLACK)
        })
    })
}

fn horizontal(a: &Vec3, b: &Vec3) -> f64 {
    ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt()
}

/// Stage predicates over the object's executed path.
pub fn evaluate_stages(path: &[Pose], task: &TaskSpec) -> StageFlags {
    let Some(last) = path.last() else {
        return StageFlags::default();
    };
    let target = &task.target;
    let tt = target.translation();
    match task.kind {
        TaskKind::SlotInsertion => {
            let s1 = path.iter().any(|p| (p.translation() - tt).norm() <= APPROACH_RADIUS);
            let s2 = path.iter().any(|p| {
                let h = p.translation().z - tt.z;
                horizontal(p.translation(), tt) <= ALIGN_TOLERANCE
                    && (0.0..=0.3).contains(&h)
                    && p.angle_to(target) <= ALIGN_ANGLE_DEG.to_radians()
            });
            let s3 = (last.translation() - tt).norm() <= FINAL_TOLERANCE
                && last.angle_to(target) <= FINAL_ANGLE_DEG.to_radians()
                && first_penetration(path, task).is_none();
            StageFlags::monotone(s1, s2, s3)
        }
        TaskKind::Pour => {
            let s1 = task.obstacles.first().is_some_and(|screen| {
                let normal = screen.pose.rotate(&Vec3::y());
                let side = |p: &Pose| (p.translation() - screen.pose.translation()).dot(&normal);
                let s0 = side(&path[0]);
                path.iter().any(|p| side(p) * s0 < 0.0)
            });
            let above = |p: &Pose| horizontal(p.translation(), tt) <= POUR_RADIUS && p.translation().z >= tt.z - POUR_RADIUS;
            let s2 = path.iter().any(above);
            let tilt = |p: &Pose| p.rotate(&Vec3::z()).dot(&Vec3::z()).clamp(-1.0, 1.0).acos();
            let mut run = 0;
            let mut s3 = false;
            for p in path {
                if above(p) && tilt(p) >= POUR_TILT_DEG.to_radians() {
                    run += 1;
                    s3 |= run >= POUR_HOLD;
                } else {
                    run = 0;
                }
            }
            StageFlags::monotone(s1, s2, s3)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub index: usize,
    pub seed: u64,
    pub stages: StageFlags,
    pub termination: Termination,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkTable {
    pub task: TaskKind,
    pub policy: String,
    pub n: usize,
    /// Successes at stages 1, 2 and 3.
    pub counts: [usize; 3],
    pub rows: Vec<BenchmarkRow>,
}

impl BenchmarkTable {
    /// One Markdown row: `| name | x/N | x/N | x/N |`.
    pub fn row(&self, name: &str) -> String {
        format!(
            "| {name} | {}/{n} | {}/{n} | {}/{n} |",
            self.counts[0],
            self.counts[1],
            self.counts[2],
            n = self.n
        )
    }
}

/// Markdown table comparing several benchmark runs.
pub fn render_table(rows: &[(String, &BenchmarkTable)]) -> String {
    let mut s = String::from("| Policy | Stage 1 | Stage 2 | Stage 3 |\n|---|---|---|---|\n");
    for (name, t) in rows {
        s.push_str(&t.row(name));
        s.push('\n');
    }
    s
}

/// Seed of rollout `index` derived from the benchmark seed.
pub fn rollout_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng.next_u64()
}

/// `n` rollouts on scenes randomized from `base`, tallied per stage.
pub fn benchmark(
    base: &SceneSpec,
    policy: &RolloutPolicy,
    n: usize,
    randomization: &RandomizationRanges,
    cfg: &RolloutConfig,
    arms: &ArmPair,
    seed: u64,
) -> Result<BenchmarkTable, ExecError> {
    if n == 0 {
        return Err(ExecError::Config("benchmark needs at least one rollout".into()));
    }
    let mut rows = Vec::with_capacity(n);
    let mut counts = [0; 3];
    for index in 0..n {
        let s = rollout_seed(seed, index);
        let scene = randomize_scene(base, randomization, s)?;
        let r = run_rollout(&scene, policy, &RolloutConfig { seed: s, ..cfg.clone() }, arms)?;
        for (c, f) in counts.iter_mut().zip([r.stages.stage1, r.stages.stage2, r.stages.stage3]) {
            *c += usize::from(f);
        }
        rows.push(BenchmarkRow {
            index,
            seed: s,
            stages: r.stages,
            termination: r.termination,
            steps: r.steps.len(),
        });
    }
    Ok(BenchmarkTable {
        task: base.task,
        policy: policy.name().into(),
        n,
        counts,
        rows,
    })
}

/// `steps.jsonl`, `summary.json` and a PLY of every `snapshot_every`-th observed cloud.
pub fn save_rollout(result: &RolloutResult, dir: &Path, snapshot_every: usize) -> Result<(), ExecError> {
    fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(File::create(dir.join("steps.jsonl"))?);
    for s in &result.steps {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    fs::write(dir.join("summary.json"), serde_json::to_vec_pretty(result)?)?;
    if snapshot_every > 0 {
        for (i, c) in result.clouds.iter().enumerate().step_by(snapshot_every) {
            write_ply(BufWriter::new(File::create(dir.join(format!("cloud_{i:03}.ply")))?), c)?;
        }
    }
    Ok(())
}

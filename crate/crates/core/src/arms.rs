//! Six-joint revolute arm kinematics: forward kinematics, damped least-squares
//! IK with an explicit failure taxonomy, warm-started trajectory following and
//! a conservative reachability test.

use std::path::Path;

use nalgebra::{Matrix6, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Pose, Vec3};

pub const JOINTS: usize = 6;

pub type JointConfig = [f64; JOINTS];

#[derive(Debug, Error)]
pub enum ArmError {
    #[error("arm `{name}` has {got} joints, expected {JOINTS}")]
    JointCount { name: String, got: usize },
    #[error("arm `{name}` joint {joint}: {msg}")]
    Joint {
        name: String,
        joint: usize,
        msg: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    /// Rotation axis in the joint frame.
    pub axis: Vec3,
    /// Joint frame relative to the previous link frame.
    pub origin: Pose,
    /// `[lo, hi]` in radians.
    pub limits: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmModel {
    pub name: String,
    pub base_pose_world: Pose,
    pub joints: Vec<Joint>,
    /// Flange to tool frame.
    pub tool: Pose,
    /// Tool pose in the base frame at `q = 0`.
    pub home_pose: Pose,
    /// Preferred seed configuration for IK.
    pub home_q: JointConfig,
}

const ARM_A_JSON: &str = include_str!("../arms/arm_a.json");
const ARM_B_JSON: &str = include_str!("../arms/arm_b.json");

impl ArmModel {
    /// Longer-reach arm (0.9 m from the shoulder).
    pub fn arm_a() -> ArmModel {
        Self::from_json(ARM_A_JSON).expect("shipped arm-A model is valid")
    }

    /// Shorter-reach arm (0.85 m from the shoulder) with tighter limits.
    pub fn arm_b() -> ArmModel {
        Self::from_json(ARM_B_JSON).expect("shipped arm-B model is valid")
    }

    pub fn by_name(name: &str) -> Option<ArmModel> {
        match name {
            "arm-A" | "arm_a" | "a" => Some(Self::arm_a()),
            "arm-B" | "arm_b" | "b" => Some(Self::arm_b()),
            _ => None,
        }
    }

    pub fn from_json(s: &str) -> Result<ArmModel, ArmError> {
        let arm: ArmModel = serde_json::from_str(s)?;
        arm.validate()?;
        Ok(arm)
    }

    pub fn load(path: &Path) -> Result<ArmModel, ArmError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ArmError> {
        if self.joints.len() != JOINTS {
            return Err(ArmError::JointCount {
                name: self.name.clone(),
                got: self.joints.len(),
            });
        }
        for (i, j) in self.joints.iter().enumerate() {
            let err = |msg: &str| ArmError::Joint {
                name: self.name.clone(),
                joint: i,
                msg: msg.into(),
            };
            if (j.axis.norm() - 1.0).abs() > 1e-9 {
                return Err(err("axis is not unit length"));
            }
            if !(j.limits[0] < j.limits[1]) {
                return Err(err("lower limit is not below upper limit"));
            }
        }
        Ok(())
    }

    pub fn with_base(&self, base: Pose) -> ArmModel {
        ArmModel {
            base_pose_world: base,
            ..self.clone()
        }
    }

    /// World position of the second joint, the center of the reach sphere.
    pub fn shoulder(&self) -> Vec3 {
        let mut t = self.base_pose_world;
        for j in &self.joints[..2] {
            t = t.compose(&j.origin);
        }
        *t.translation()
    }

    /// Distance from the shoulder to the tool at full extension.
    pub fn reach(&self) -> f64 {
        self.joints[2..]
            .iter()
            .map(|j| j.origin.translation().norm())
            .sum::<f64>()
            + self.tool.translation().norm()
    }

    pub fn within_limits(&self, q: &JointConfig) -> bool {
        self.joints
            .iter()
            .zip(q)
            .all(|(j, &v)| v >= j.limits[0] && v <= j.limits[1])
    }

    pub fn clamp(&self, q: &JointConfig) -> JointConfig {
        let mut out = *q;
        for (v, j) in out.iter_mut().zip(&self.joints) {
            *v = v.clamp(j.limits[0], j.limits[1]);
        }
        out
    }
}

pub fn fk(arm: &ArmModel, q: &JointConfig) -> Pose {
    let mut t = arm.base_pose_world;
    for (j, &angle) in arm.joints.iter().zip(q) {
        t = t.compose(&j.origin).compose(&Pose::from_axis_angle(&j.axis, angle, Vec3::zeros()));
    }
    t.compose(&arm.tool)
}

/// Task-space error `[p_target − p; rotvec(R_target Rᵀ)]`, world frame.
fn task_error(current: &Pose, target: &Pose) -> Vector6<f64> {
    let dp = target.translation() - current.translation();
    let dr = (target.rotation() * current.rotation().inverse()).scaled_axis();
    Vector6::new(dp.x, dp.y, dp.z, dr.x, dr.y, dr.z)
}

const FD_STEP: f64 = 1e-6;

/// Task Jacobian by central differences: linear velocity of the tool origin
/// and world-frame angular velocity per joint.
pub fn jacobian(arm: &ArmModel, q: &JointConfig) -> Matrix6<f64> {
    let mut j = Matrix6::zeros();
    for c in 0..JOINTS {
        let (mut qp, mut qm) = (*q, *q);
        qp[c] += FD_STEP;
        qm[c] -= FD_STEP;
        let (fp, fm) = (fk(arm, &qp), fk(arm, &qm));
        let v = (fp.translation() - fm.translation()) / (2.0 * FD_STEP);
        let w = (fp.rotation() * fm.rotation().inverse()).scaled_axis() / (2.0 * FD_STEP);
        j.fixed_view_mut::<3, 1>(0, c).copy_from(&v);
        j.fixed_view_mut::<3, 1>(3, c).copy_from(&w);
    }
    j
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IkConfig {
    pub damping: f64,
    pub max_iters: usize,
    pub tol_pos: f64,
    pub tol_rot: f64,
    /// Extra attempts from fixed seed configurations when the first fails.
    pub restarts: usize,
}

impl Default for IkConfig {
    fn default() -> Self {
        Self {
            damping: 1e-3,
            max_iters: 200,
            tol_pos: 1e-4,
            tol_rot: 1e-3,
            restarts: 32,
        }
    }
}

impl IkConfig {
    pub fn loose() -> Self {
        Self {
            tol_pos: 1e-3,
            tol_rot: 1e-2,
            restarts: 0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IkFailureReason {
    MaxIters,
    JointLimit,
    Singular,
    /// Consecutive trajectory solutions differ by more than the allowed joint step.
    StepLimit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IkFailure {
    pub reason: IkFailureReason,
    /// Best configuration found.
    pub q: JointConfig,
    pub pos_err: f64,
    pub rot_err: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IkSolution {
    pub q: JointConfig,
    pub iterations: usize,
    pub pos_err: f64,
    pub rot_err: f64,
}

const LAMBDA_MAX: f64 = 1e6;
/// Largest joint change in one iteration, radians.
const MAX_ITER_STEP: f64 = 0.3;

fn errors(e: &Vector6<f64>) -> (f64, f64) {
    (
        e.fixed_rows::<3>(0).norm(),
        e.fixed_rows::<3>(3).norm(),
    )
}

fn at_limit(arm: &ArmModel, q: &JointConfig) -> bool {
    arm.joints
        .iter()
        .zip(q)
        .any(|(j, &v)| v <= j.limits[0] + 1e-9 || v >= j.limits[1] - 1e-9)
}

/// Damped least-squares step. Joints resting on a limit whose step would push
/// them further out are removed from the Jacobian and the step is re-solved.
fn damped_step(
    arm: &ArmModel,
    q: &JointConfig,
    j_full: &Matrix6<f64>,
    e: &Vector6<f64>,
    lambda: f64,
) -> Option<Vector6<f64>> {
    let mut j = *j_full;
    let mut locked = [false; JOINTS];
    loop {
        let jt = j.transpose();
        let lhs = jt * j + Matrix6::identity() * (lambda * lambda);
        let dq = lhs.cholesky()?.solve(&(jt * e));
        let mut changed = false;
        for (k, jt) in arm.joints.iter().enumerate() {
            let pushing_out = (q[k] <= jt.limits[0] + 1e-12 && dq[k] < 0.0)
                || (q[k] >= jt.limits[1] - 1e-12 && dq[k] > 0.0);
            if pushing_out && !locked[k] {
                locked[k] = true;
                j.column_mut(k).fill(0.0);
                changed = true;
            }
        }
        if !changed {
            // trust region: large steps jump between wrist branches
            let biggest = dq.amax();
            return Some(if biggest > MAX_ITER_STEP {
                dq * (MAX_ITER_STEP / biggest)
            } else {
                dq
            });
        }
    }
}

/// One damped least-squares descent from `q0`.
fn dls_from(arm: &ArmModel, target: &Pose, q0: &JointConfig, cfg: &IkConfig) -> Result<IkSolution, IkFailure> {
    let mut q = arm.clamp(q0);
    let mut e = task_error(&fk(arm, &q), target);
    let mut lambda = cfg.damping;
    let converged = |e: &Vector6<f64>| {
        let (p, r) = errors(e);
        p <= cfg.tol_pos && r <= cfg.tol_rot
    };
    let fail = |reason, q: JointConfig, e: &Vector6<f64>| {
        let (pos_err, rot_err) = errors(e);
        Err(IkFailure {
            reason,
            q,
            pos_err,
            rot_err,
        })
    };
    let mut iter = 0;
    while !converged(&e) {
        if iter == cfg.max_iters {
            let reason = if at_limit(arm, &q) {
                IkFailureReason::JointLimit
            } else {
                IkFailureReason::MaxIters
            };
            return fail(reason, q, &e);
        }
        iter += 1;
        let j_full = jacobian(arm, &q);
        let mut accepted = false;
        while lambda <= LAMBDA_MAX {
            let Some(dq) = damped_step(arm, &q, &j_full, &e, lambda) else {
                lambda *= 10.0;
                continue;
            };
            let mut cand = q;
            for (v, d) in cand.iter_mut().zip(dq.iter()) {
                *v += d;
            }
            let cand = arm.clamp(&cand);
            let e_new = task_error(&fk(arm, &cand), target);
            if e_new.norm() < e.norm() {
                q = cand;
                e = e_new;
                lambda = (lambda * 0.5).max(1e-12);
                accepted = true;
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            // no damping level reduces the error: a local minimum against a
            // limit or a rank-deficient Jacobian
            let reason = if at_limit(arm, &q) {
                IkFailureReason::JointLimit
            } else {
                IkFailureReason::Singular
            };
            return fail(reason, q, &e);
        }
    }
    let (pos_err, rot_err) = errors(&e);
    Ok(IkSolution {
        q,
        iterations: iter,
        pos_err,
        rot_err,
    })
}

/// Fixed seed configurations spread over the joint ranges: a structured
/// pattern around the home configuration followed by pseudo-random draws from
/// a constant stream.
pub fn seed_configs(arm: &ArmModel) -> Vec<JointConfig> {
    let pattern: [[f64; JOINTS]; 8] = [
        [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [0.5, -0.3, 0.4, 0.5, -0.5, 0.5],
        [-0.5, 0.3, -0.4, -0.5, 0.5, -0.5],
        [0.5, 0.5, -0.5, -0.5, 0.5, 0.0],
        [-0.5, -0.5, 0.5, 0.5, -0.5, 0.0],
        [0.25, -0.6, -0.3, 0.0, 0.6, -0.25],
        [-0.25, 0.6, 0.3, 0.0, -0.6, 0.25],
        [0.7, 0.2, 0.6, -0.3, 0.3, 0.7],
    ];
    let mut seeds: Vec<JointConfig> = pattern
        .iter()
        .map(|frac| {
            let mut q = arm.home_q;
            for (k, j) in arm.joints.iter().enumerate() {
                let span = j.limits[1] - j.limits[0];
                q[k] = (q[k] + frac[k] * span * 0.5).clamp(j.limits[0], j.limits[1]);
            }
            q
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED_STREAM);
    for _ in 0..RANDOM_SEEDS {
        let mut q = [0.0; JOINTS];
        for (v, j) in q.iter_mut().zip(&arm.joints) {
            let mid = 0.5 * (j.limits[0] + j.limits[1]);
            let half = 0.45 * (j.limits[1] - j.limits[0]);
            *v = mid + half * rng.random_range(-1.0..=1.0);
        }
        seeds.push(q);
    }
    seeds
}

const SEED_STREAM: u64 = 0x1c0ffee;
const RANDOM_SEEDS: usize = 24;

/// Damped least squares from `q0`; when that fails and `cfg.restarts > 0`,
/// retries from up to that many fixed seeds. The reported failure is the one
/// from `q0`.
pub fn ik_dls(arm: &ArmModel, target: &Pose, q0: &JointConfig, cfg: &IkConfig) -> Result<IkSolution, IkFailure> {
    let first = dls_from(arm, target, q0, cfg);
    if first.is_ok() || cfg.restarts == 0 {
        return first;
    }
    for seed in seed_configs(arm).iter().take(cfg.restarts) {
        if let Ok(s) = dls_from(arm, target, seed, cfg) {
            return Ok(s);
        }
    }
    first
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FollowFailure {
    pub index: usize,
    pub reason: IkFailureReason,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FollowConfig {
    pub ik: IkConfig,
    /// Largest allowed per-joint change between consecutive targets, radians.
    pub max_step: f64,
}

impl Default for FollowConfig {
    fn default() -> Self {
        Self {
            ik: IkConfig {
                restarts: 0,
                ..IkConfig::default()
            },
            max_step: 0.2,
        }
    }
}

/// Sequential IK, each solve seeded with the previous solution.
pub fn follow_trajectory(
    arm: &ArmModel,
    ee_targets: &[Pose],
    q_start: &JointConfig,
    cfg: &FollowConfig,
) -> Result<Vec<JointConfig>, (Vec<JointConfig>, FollowFailure)> {
    let mut out = Vec::with_capacity(ee_targets.len());
    let mut q = *q_start;
    for (index, target) in ee_targets.iter().enumerate() {
        match ik_dls(arm, target, &q, &cfg.ik) {
            Ok(sol) => {
                let jump = sol
                    .q
                    .iter()
                    .zip(&q)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                if jump > cfg.max_step {
                    return Err((
                        out,
                        FollowFailure {
                            index,
                            reason: IkFailureReason::StepLimit,
                        },
                    ));
                }
                q = sol.q;
                out.push(q);
            }
            Err(f) => {
                return Err((
                    out,
                    FollowFailure {
                        index,
                        reason: f.reason,
                    },
                ))
            }
        }
    }
    Ok(out)
}

/// Reachability: inside the reach sphere and solvable at loose tolerance from
/// at least one configuration of the fixed seed set.
pub fn reachable(arm: &ArmModel, pose: &Pose) -> bool {
    if (pose.translation() - arm.shoulder()).norm() > arm.reach() {
        return false;
    }
    seed_configs(arm)
        .iter()
        .any(|s| dls_from(arm, pose, s, &IkConfig::loose()).is_ok())
}

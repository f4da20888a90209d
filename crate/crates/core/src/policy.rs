//! Object-centric point-cloud policy: a per-point network with a symmetric
//! max-pool, two trajectory heads (object and head motion) and a termination
//! head. Heads are either deterministic regressors or conditional denoisers.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DMatrixView, Matrix3, Rotation3, UnitQuaternion};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{voxel_downsample, CloudError, FrameTag, LabeledCloud};
use crate::geometry::{Pose, Vec3};
use crate::traj::{HeadTrajRel, TrainingSample};

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_FORMAT: &str = "activeglasses-policy";
const POINT_DIM: usize = 6;
const POSE_DIM: usize = 9;
const TIME_EMB: usize = 8;
const TERM_HIDDEN: usize = 32;
const SUBSAMPLE_SALT: u64 = 0x5ab5_a3b1;
const BETA_MIN: f64 = 1e-3;
const BETA_MAX: f64 = 0.3;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("cloud must be in the world frame")]
    NotWorld,
    #[error("cloud is empty after preprocessing")]
    EmptyCloud,
    #[error("policy is conditioned on the current object pose but none was given")]
    ConditioningMismatch,
    #[error("invalid policy config: {0}")]
    Config(String),
    #[error("sample has {got} trajectory steps, policy horizon is {expected}")]
    Horizon { expected: usize, got: usize },
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("operation requires a {0:?} head")]
    HeadType(HeadType),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadType {
    Regression,
    Denoising,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectRep {
    /// World-frame object poses.
    Absolute,
    /// Object poses relative to the current object pose.
    Relative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub horizon: usize,
    pub voxel: f64,
    pub max_points: usize,
    pub encoder_widths: Vec<usize>,
    pub head_hidden: usize,
    pub head: HeadType,
    pub object_rep: ObjectRep,
    pub condition_on_current_pose: bool,
    pub denoise_steps: usize,
    pub seed: u64,
    /// World coordinates are fed to the network as `(p - center) / scale`.
    pub workspace_center: [f64; 3],
    pub workspace_scale: f64,
    /// Weight of squared translation error (per m²) against squared rotation angle (per rad²).
    pub translation_weight: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            horizon: 16,
            voxel: 0.01,
            max_points: 1024,
            encoder_widths: vec![32, 64],
            head_hidden: 128,
            head: HeadType::Regression,
            object_rep: ObjectRep::Absolute,
            condition_on_current_pose: false,
            denoise_steps: 20,
            seed: 0,
            workspace_center: [0.35, 0.35, 0.15],
            workspace_scale: 0.25,
            translation_weight: 100.0,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: &str| Err(PolicyError::Config(m.into()));
        if self.horizon < 1 {
            return bad("horizon must be at least 1");
        }
        if self.max_points < 64 {
            return bad("max_points must be at least 64");
        }
        if !(self.voxel > 0.0) {
            return bad("voxel size must be positive");
        }
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) {
            return bad("encoder needs at least one non-empty layer");
        }
        if self.head_hidden == 0 {
            return bad("head_hidden must be positive");
        }
        if self.head == HeadType::Denoising && self.denoise_steps < 1 {
            return bad("denoising needs at least one step");
        }
        if !(self.workspace_scale > 0.0) {
            return bad("workspace_scale must be positive");
        }
        if !(self.translation_weight > 0.0) {
            return bad("translation_weight must be positive");
        }
        Ok(())
    }

    /// The four object-representation × conditioning combinations, labeled.
    pub fn ablations(base: &PolicyConfig) -> Vec<(String, PolicyConfig)> {
        let mut out = Vec::new();
        for rep in [ObjectRep::Absolute, ObjectRep::Relative] {
            for cond in [false, true] {
                let name = format!(
                    "{} {} current obj pose",
                    match rep {
                        ObjectRep::Absolute => "abs",
                        ObjectRep::Relative => "rel",
                    },
                    if cond { "w/" } else { "w/o" }
                );
                out.push((
                    name,
                    PolicyConfig {
                        object_rep: rep,
                        condition_on_current_pose: cond,
                        ..base.clone()
                    },
                ));
            }
        }
        out
    }

    fn traj_dim(&self) -> usize {
        POSE_DIM * self.horizon
    }

    fn feature_dim(&self) -> usize {
        *self.encoder_widths.last().expect("validated")
    }

    fn context_dim(&self) -> usize {
        self.feature_dim() + if self.condition_on_current_pose { POSE_DIM } else { 0 }
    }

    fn center(&self) -> Vec3 {
        Vec3::from(self.workspace_center)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: usize,
    b: usize,
    inp: usize,
    out: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    encoder: Vec<Dense>,
    obj: Vec<Dense>,
    head: Vec<Dense>,
    term: Vec<Dense>,
    blocks: Vec<Block>,
    len: usize,
}

impl Layout {
    fn new(cfg: &PolicyConfig) -> Layout {
        let mut blocks = Vec::new();
        let mut len = 0;
        let mut chain = |name: &str, dims: &[usize]| -> Vec<Dense> {
            dims.windows(2)
                .enumerate()
                .map(|(i, d)| {
                    let (inp, out) = (d[0], d[1]);
                    let w = len;
                    blocks.push(Block {
                        name: format!("{name}.{i}.w"),
                        rows: out,
                        cols: inp,
                    });
                    len += inp * out;
                    let b = len;
                    blocks.push(Block {
                        name: format!("{name}.{i}.b"),
                        rows: out,
                        cols: 1,
                    });
                    len += out;
                    Dense { w, b, inp, out }
                })
                .collect()
        };
        let mut enc_dims = vec![POINT_DIM];
        enc_dims.extend(&cfg.encoder_widths);
        let encoder = chain("encoder", &enc_dims);
        let (ctx, d, h) = (cfg.context_dim(), cfg.traj_dim(), cfg.head_hidden);
        let traj_dims = match cfg.head {
            HeadType::Regression => vec![ctx, h, d],
            HeadType::Denoising => vec![ctx + d + TIME_EMB, h, h, d],
        };
        let obj = chain("object_head", &traj_dims);
        let head = chain("head_head", &traj_dims);
        let term = chain("termination", &[ctx, TERM_HIDDEN, 1]);
        Layout {
            encoder,
            obj,
            head,
            term,
            blocks,
            len,
        }
    }
}

/// Network weights plus the config that shaped them.
#[derive(Debug, Clone)]
pub struct PolicyParams {
    pub cfg: PolicyConfig,
    pub data: Vec<f64>,
    layout: Layout,
}

impl PartialEq for PolicyParams {
    fn eq(&self, other: &Self) -> bool {
        self.cfg == other.cfg && self.data == other.data
    }
}

impl PolicyParams {
    /// Deterministic initialization from `cfg.seed`.
    pub fn init(cfg: &PolicyConfig) -> Result<PolicyParams, PolicyError> {
        cfg.validate()?;
        let layout = Layout::new(cfg);
        let mut data = vec![0.0; layout.len];
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let fill = |layers: &[Dense], data: &mut [f64], first_gain: f64, rng: &mut ChaCha8Rng| {
            for (i, l) in layers.iter().enumerate() {
                let gain = if i == 0 { first_gain } else { 1.0 };
                let a = gain * (3.0 / l.inp as f64).sqrt();
                for v in &mut data[l.w..l.w + l.inp * l.out] {
                    *v = rng.random_range(-a..a);
                }
            }
        };
        fill(&layout.encoder, &mut data, 2.0, &mut rng);
        // spread first-layer biases so max-pooled features start diverse
        let e0 = layout.encoder[0];
        for v in &mut data[e0.b..e0.b + e0.out] {
            *v = rng.random_range(-1.0..1.0);
        }
        fill(&layout.obj, &mut data, 1.0, &mut rng);
        fill(&layout.head, &mut data, 1.0, &mut rng);
        fill(&layout.term, &mut data, 1.0, &mut rng);
        let mut params = PolicyParams {
            cfg: cfg.clone(),
            data,
            layout,
        };
        if cfg.head == HeadType::Regression {
            // small outputs that decode to identity rotations
            for layers in [params.layout.obj.clone(), params.layout.head.clone()] {
                let last = *layers.last().expect("non-empty head");
                for v in &mut params.data[last.w..last.w + last.inp * last.out] {
                    *v *= 0.1;
                }
                for k in 0..cfg.horizon {
                    params.data[last.b + POSE_DIM * k + 3] = 1.0;
                    params.data[last.b + POSE_DIM * k + 7] = 1.0;
                }
            }
        }
        Ok(params)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.layout.blocks
    }

    /// `(offset, len)` of each block in `data`, in block order.
    pub fn block_ranges(&self) -> Vec<(String, usize, usize)> {
        let mut off = 0;
        self.layout
            .blocks
            .iter()
            .map(|b| {
                let r = (b.name.clone(), off, b.rows * b.cols);
                off += b.rows * b.cols;
                r
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn dense_forward(data: &[f64], l: &Dense, x: &[f64], out: &mut [f64]) {
    let w = &data[l.w..l.w + l.inp * l.out];
    for o in 0..l.out {
        let row = &w[o * l.inp..(o + 1) * l.inp];
        let mut acc = data[l.b + o];
        for (a, b) in row.iter().zip(x) {
            acc += a * b;
        }
        out[o] = acc;
    }
}

/// Accumulates weight/bias gradients and returns the input gradient.
fn dense_backward(data: &[f64], grad: &mut [f64], l: &Dense, x: &[f64], gout: &[f64], gin: &mut [f64]) {
    gin.iter_mut().for_each(|v| *v = 0.0);
    for o in 0..l.out {
        let g = gout[o];
        if g == 0.0 {
            continue;
        }
        grad[l.b + o] += g;
        let row = l.w + o * l.inp;
        for i in 0..l.inp {
            grad[row + i] += g * x[i];
            gin[i] += g * data[row + i];
        }
    }
}

/// Hidden layers use tanh, the last layer is linear. Returns every layer's
/// output (the last one is the network output).
fn mlp_forward(data: &[f64], layers: &[Dense], input: &[f64]) -> Vec<Vec<f64>> {
    let mut acts = Vec::with_capacity(layers.len());
    let mut x = input.to_vec();
    for (i, l) in layers.iter().enumerate() {
        let mut y = vec![0.0; l.out];
        dense_forward(data, l, &x, &mut y);
        if i + 1 < layers.len() {
            y.iter_mut().for_each(|v| *v = v.tanh());
        }
        acts.push(y.clone());
        x = y;
    }
    acts
}

fn mlp_backward(
    data: &[f64],
    grad: &mut [f64],
    layers: &[Dense],
    input: &[f64],
    acts: &[Vec<f64>],
    gout: &[f64],
) -> Vec<f64> {
    let mut g = gout.to_vec();
    for i in (0..layers.len()).rev() {
        let l = &layers[i];
        if i + 1 < layers.len() {
            for (gv, a) in g.iter_mut().zip(&acts[i]) {
                *gv *= 1.0 - a * a;
            }
        }
        let x = if i == 0 { input } else { &acts[i - 1] };
        let mut gin = vec![0.0; l.inp];
        dense_backward(data, grad, l, x, &g, &mut gin);
        g = gin;
    }
    g
}

/// A cloud reduced and normalized for the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedCloud {
    pub points: Vec<[f64; POINT_DIM]>,
    pub subsample_seed: u64,
}

/// Voxel-downsamples, subsamples to at most `max_points` with a fixed seed and
/// normalizes coordinates and colors.
pub fn prepare_cloud(cloud: &LabeledCloud, cfg: &PolicyConfig) -> Result<PreparedCloud, PolicyError> {
    if cloud.frame != FrameTag::World {
        return Err(PolicyError::NotWorld);
    }
    let down = voxel_downsample(cloud, cfg.voxel)?;
    if down.is_empty() {
        return Err(PolicyError::EmptyCloud);
    }
    let subsample_seed = cfg.seed ^ SUBSAMPLE_SALT;
    let keep: Vec<usize> = if down.len() > cfg.max_points {
        let mut rng = ChaCha8Rng::seed_from_u64(subsample_seed);
        let mut idx = index::sample(&mut rng, down.len(), cfg.max_points).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..down.len()).collect()
    };
    let (c, s) = (cfg.center(), cfg.workspace_scale);
    let points = keep
        .iter()
        .map(|&i| {
            let p = (down.points[i] - c) / s;
            let col = down.colors.as_ref().map_or([0.0; 3], |cs| {
                let v = cs[i];
                [
                    v[0] as f64 / 255.0 - 0.5,
                    v[1] as f64 / 255.0 - 0.5,
                    v[2] as f64 / 255.0 - 0.5,
                ]
            });
            [p.x, p.y, p.z, col[0], col[1], col[2]]
        })
        .collect();
    Ok(PreparedCloud {
        points,
        subsample_seed,
    })
}

fn point_forward(data: &[f64], layers: &[Dense], p: &[f64; POINT_DIM]) -> Vec<Vec<f64>> {
    let mut acts = Vec::with_capacity(layers.len());
    let mut x: Vec<f64> = p.to_vec();
    for l in layers {
        let mut y = vec![0.0; l.out];
        dense_forward(data, l, &x, &mut y);
        y.iter_mut().for_each(|v| *v = squash(*v));
        acts.push(y.clone());
        x = y;
    }
    acts
}

/// Encoder activation: smooth, odd and saturating like tanh, but cheap.
fn squash(x: f64) -> f64 {
    x / (1.0 + x * x).sqrt()
}

/// Derivative of [`squash`] in terms of its output.
fn squash_grad(y: f64) -> f64 {
    let t = 1.0 - y * y;
    t * t.sqrt()
}

/// Encoder activations of every point, one row per point.
fn encode_points(params: &PolicyParams, points: &[[f64; POINT_DIM]]) -> DMatrix<f64> {
    let data = &params.data;
    let mut x = DMatrix::from_fn(points.len(), POINT_DIM, |r, c| points[r][c]);
    for l in &params.layout.encoder {
        // row-major `out × inp` weights read column-major are the transpose
        let wt = DMatrixView::from_slice(&data[l.w..l.w + l.inp * l.out], l.inp, l.out);
        let mut y = &x * wt;
        for (o, mut col) in y.column_iter_mut().enumerate() {
            let b = data[l.b + o];
            col.iter_mut().for_each(|v| *v = squash(*v + b));
        }
        x = y;
    }
    x
}

/// Max-pooled feature plus, per channel, the index of the winning point.
fn encode_prepared(params: &PolicyParams, cloud: &PreparedCloud) -> (Vec<f64>, Vec<usize>) {
    let acts = encode_points(params, &cloud.points);
    acts.column_iter()
        .map(|col| {
            let mut best = (f64::NEG_INFINITY, 0);
            for (i, &v) in col.iter().enumerate() {
                if v > best.0 {
                    best = (v, i);
                }
            }
            best
        })
        .unzip()
}

/// Permutation-invariant global feature of a world-frame cloud.
pub fn encode(params: &PolicyParams, cloud: &LabeledCloud) -> Result<Vec<f64>, PolicyError> {
    let prepared = prepare_cloud(cloud, &params.cfg)?;
    Ok(encode_prepared(params, &prepared).0)
}

/// Encoder output for a single already-normalized point.
pub fn point_feature(params: &PolicyParams, point: &[f64; POINT_DIM]) -> Vec<f64> {
    encode_points(params, std::slice::from_ref(point)).row(0).iter().copied().collect()
}

fn pose_features(pose: &Pose, cfg: &PolicyConfig) -> [f64; POSE_DIM] {
    let t = (pose.translation() - cfg.center()) / cfg.workspace_scale;
    let r = pose.rotation_matrix();
    [t.x, t.y, t.z, r[(0, 0)], r[(1, 0)], r[(2, 0)], r[(0, 1)], r[(1, 1)], r[(2, 1)]]
}

fn context(params: &PolicyParams, feat: &[f64], current: Option<&Pose>) -> Result<Vec<f64>, PolicyError> {
    let mut ctx = feat.to_vec();
    if params.cfg.condition_on_current_pose {
        let pose = current.ok_or(PolicyError::ConditioningMismatch)?;
        ctx.extend(pose_features(pose, &params.cfg));
    }
    Ok(ctx)
}

/// Gram-Schmidt on the two raw columns.
fn six_d_to_matrix(a1: &Vec3, a2: &Vec3) -> Matrix3<f64> {
    let b1 = a1 / (a1.norm() + 1e-300);
    let u2 = a2 - b1 * b1.dot(a2);
    let b2 = u2 / (u2.norm() + 1e-300);
    let b3 = b1.cross(&b2);
    Matrix3::from_columns(&[b1, b2, b3])
}

#[derive(Debug, Clone, Copy)]
struct StepTarget {
    t: Vec3,
    r: Matrix3<f64>,
}

impl StepTarget {
    fn from_pose(p: &Pose) -> Self {
        Self {
            t: *p.translation(),
            r: p.rotation_matrix(),
        }
    }
}

fn decode_step(raw: &[f64], offset: &Vec3, scale: f64) -> StepTarget {
    let t = Vec3::new(raw[0], raw[1], raw[2]) * scale + offset;
    let r = six_d_to_matrix(&Vec3::new(raw[3], raw[4], raw[5]), &Vec3::new(raw[6], raw[7], raw[8]));
    StepTarget { t, r }
}

fn matrix_to_pose(r: &Matrix3<f64>, t: Vec3) -> Pose {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r));
    Pose::new(q, t)
}

fn encode_step(target: &StepTarget, offset: &Vec3, scale: f64) -> [f64; POSE_DIM] {
    let t = (target.t - offset) / scale;
    let r = &target.r;
    [t.x, t.y, t.z, r[(0, 0)], r[(1, 0)], r[(2, 0)], r[(0, 1)], r[(1, 1)], r[(2, 1)]]
}

/// `tw‖t − t*‖² + θ²` for one step, with the gradient written into `g` (w.r.t. the raw outputs).
fn step_loss(raw: &[f64], target: &StepTarget, offset: &Vec3, scale: f64, tw: f64, g: &mut [f64]) -> f64 {
    let pred = decode_step(raw, offset, scale);
    let dt = pred.t - target.t;
    for k in 0..3 {
        g[k] = 2.0 * tw * dt[k] * scale;
    }
    let m = target.r.transpose() * pred.r;
    let c = 0.5 * (m.trace() - 1.0);
    let w = Vec3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]);
    let s = 0.5 * w.norm();
    let theta = s.atan2(c);
    let denom = s * s + c * c;
    let mut gm = Matrix3::zeros();
    if theta != 0.0 && denom > 0.0 {
        let k = if s > 0.0 { (theta / s) * c / (2.0 * denom) } else { 0.0 };
        gm[(2, 1)] += k * w.x;
        gm[(1, 2)] -= k * w.x;
        gm[(0, 2)] += k * w.y;
        gm[(2, 0)] -= k * w.y;
        gm[(1, 0)] += k * w.z;
        gm[(0, 1)] -= k * w.z;
        let kc = -theta * s / denom;
        for i in 0..3 {
            gm[(i, i)] += kc;
        }
    }
    let gr = target.r * gm;
    let (ga1, ga2) = six_d_backward(
        &Vec3::new(raw[3], raw[4], raw[5]),
        &Vec3::new(raw[6], raw[7], raw[8]),
        &gr,
    );
    g[3..6].copy_from_slice(ga1.as_slice());
    g[6..9].copy_from_slice(ga2.as_slice());
    tw * dt.norm_squared() + theta * theta
}

fn six_d_backward(a1: &Vec3, a2: &Vec3, gr: &Matrix3<f64>) -> (Vec3, Vec3) {
    let n1 = a1.norm() + 1e-300;
    let b1 = a1 / n1;
    let u2 = a2 - b1 * b1.dot(a2);
    let n2 = u2.norm() + 1e-300;
    let b2 = u2 / n2;
    let (g1, g2, g3): (Vec3, Vec3, Vec3) = (gr.column(0).into(), gr.column(1).into(), gr.column(2).into());
    let mut gb1 = g1 + b2.cross(&g3);
    let gb2 = g2 + g3.cross(&b1);
    let gu2 = (gb2 - b2 * b2.dot(&gb2)) / n2;
    let ga2 = gu2 - b1 * b1.dot(&gu2);
    gb1 += -a2 * b1.dot(&gu2) - gu2 * b1.dot(a2);
    let ga1 = (gb1 - b1 * b1.dot(&gb1)) / n1;
    (ga1, ga2)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy on a logit and its derivative.
fn bce_with_logit(z: f64, y: f64) -> (f64, f64) {
    let softplus = z.max(0.0) + (-z.abs()).exp().ln_1p();
    (softplus - y * z, sigmoid(z) - y)
}

fn time_embedding(k: usize, steps: usize) -> [f64; TIME_EMB] {
    let tau = (k as f64 + 0.5) / steps as f64;
    let mut e = [0.0; TIME_EMB];
    for j in 0..TIME_EMB / 2 {
        let a = std::f64::consts::PI * tau * (1 << j) as f64;
        e[2 * j] = a.sin();
        e[2 * j + 1] = a.cos();
    }
    e
}

struct Schedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl Schedule {
    fn linear(steps: usize) -> Schedule {
        let beta: Vec<f64> = (0..steps)
            .map(|k| {
                if steps == 1 {
                    BETA_MAX
                } else {
                    BETA_MIN + (BETA_MAX - BETA_MIN) * k as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &beta {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Schedule { beta, alpha_bar }
    }
}

/// One training example in network-ready form.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub cloud: PreparedCloud,
    obj: Vec<StepTarget>,
    head: Vec<StepTarget>,
    pub terminal: u8,
    pub current_obj_pose: Pose,
}

impl PreparedSample {
    /// Object targets as poses, in the config's representation.
    pub fn object_targets(&self) -> Vec<Pose> {
        self.obj.iter().map(|s| matrix_to_pose(&s.r, s.t)).collect()
    }
}

pub fn prepare_sample(
    sample: &TrainingSample,
    cloud: &LabeledCloud,
    cfg: &PolicyConfig,
) -> Result<PreparedSample, PolicyError> {
    for got in [sample.obj_abs.len(), sample.head_rel.len()] {
        if got != cfg.horizon {
            return Err(PolicyError::Horizon {
                expected: cfg.horizon,
                got,
            });
        }
    }
    let obj = sample
        .obj_abs
        .iter()
        .map(|p| match cfg.object_rep {
            ObjectRep::Absolute => StepTarget::from_pose(p),
            ObjectRep::Relative => StepTarget::from_pose(&sample.current_obj_pose.relative(p)),
        })
        .collect();
    Ok(PreparedSample {
        cloud: prepare_cloud(cloud, cfg)?,
        obj,
        head: sample.head_rel.iter().map(StepTarget::from_pose).collect(),
        terminal: sample.terminal,
        current_obj_pose: sample.current_obj_pose,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub object: f64,
    pub head: f64,
    pub termination: f64,
}

fn obj_offset(cfg: &PolicyConfig) -> Vec3 {
    match cfg.object_rep {
        ObjectRep::Absolute => cfg.center(),
        ObjectRep::Relative => Vec3::zeros(),
    }
}

/// Per-sample noise for the denoising objective.
fn denoise_draw(noise_seed: u64, sample: usize, dims: usize, steps: usize) -> [(usize, Vec<f64>); 2] {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed ^ (sample as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut draw = || {
        let k = rng.random_range(0..steps);
        let eps: Vec<f64> = (0..dims).map(|_| StandardNormal.sample(&mut rng)).collect();
        (k, eps)
    };
    [draw(), draw()]
}

fn sample_loss(
    params: &PolicyParams,
    s: &PreparedSample,
    sample_index: usize,
    noise_seed: u64,
    grad: Option<&mut [f64]>,
) -> Result<LossReport, PolicyError> {
    let cfg = &params.cfg;
    let data = &params.data;
    let lay = &params.layout;
    let (feat, arg) = encode_prepared(params, &s.cloud);
    let ctx = context(params, &feat, Some(&s.current_obj_pose))?;
    let h = cfg.horizon;
    let scale = cfg.workspace_scale;
    let offsets = [obj_offset(cfg), Vec3::zeros()];
    let targets = [&s.obj, &s.head];
    let heads = [&lay.obj, &lay.head];
    let mut gctx = vec![0.0; ctx.len()];
    let mut grad = grad;
    let mut parts = [0.0; 2];

    match cfg.head {
        HeadType::Regression => {
            for which in 0..2 {
                let acts = mlp_forward(data, heads[which], &ctx);
                let out = acts.last().expect("head has layers");
                let mut gout = vec![0.0; out.len()];
                let mut sum = 0.0;
                for k in 0..h {
                    let r = POSE_DIM * k..POSE_DIM * (k + 1);
                    sum += step_loss(&out[r.clone()], &targets[which][k], &offsets[which], scale, cfg.translation_weight, &mut gout[r]);
                }
                parts[which] = sum / h as f64;
                if let Some(g) = grad.as_deref_mut() {
                    gout.iter_mut().for_each(|v| *v /= h as f64);
                    let gin = mlp_backward(data, g, heads[which], &ctx, &acts, &gout);
                    for (a, b) in gctx.iter_mut().zip(&gin) {
                        *a += b;
                    }
                }
            }
        }
        HeadType::Denoising => {
            let d = cfg.traj_dim();
            let sched = Schedule::linear(cfg.denoise_steps);
            let draws = denoise_draw(noise_seed, sample_index, d, cfg.denoise_steps);
            for which in 0..2 {
                let (k, eps) = &draws[which];
                let x0: Vec<f64> = targets[which]
                    .iter()
                    .flat_map(|t| encode_step(t, &offsets[which], scale))
                    .collect();
                let ab = sched.alpha_bar[*k];
                let mut input = ctx.clone();
                input.extend(x0.iter().zip(eps).map(|(x, e)| ab.sqrt() * x + (1.0 - ab).sqrt() * e));
                input.extend(time_embedding(*k, cfg.denoise_steps));
                let acts = mlp_forward(data, heads[which], &input);
                let out = acts.last().expect("head has layers");
                let mut sum = 0.0;
                let mut gout = vec![0.0; d];
                for i in 0..d {
                    let diff = out[i] - x0[i];
                    sum += diff * diff;
                    gout[i] = 2.0 * diff / d as f64;
                }
                parts[which] = sum / d as f64;
                if let Some(g) = grad.as_deref_mut() {
                    let gin = mlp_backward(data, g, heads[which], &input, &acts, &gout);
                    for (a, b) in gctx.iter_mut().zip(&gin[..ctx.len()]) {
                        *a += b;
                    }
                }
            }
        }
    }

    let tacts = mlp_forward(data, &lay.term, &ctx);
    let z = tacts.last().expect("termination head")[0];
    let (bce, dz) = bce_with_logit(z, s.terminal as f64);
    if let Some(g) = grad.as_deref_mut() {
        let gin = mlp_backward(data, g, &lay.term, &ctx, &tacts, &[dz]);
        for (a, b) in gctx.iter_mut().zip(&gin) {
            *a += b;
        }
        encoder_backward(params, g, &s.cloud, &arg, &gctx[..cfg.feature_dim()]);
    }
    Ok(LossReport {
        total: parts[0] + parts[1] + bce,
        object: parts[0],
        head: parts[1],
        termination: bce,
    })
}

/// Routes each pooled channel's gradient to its winning point.
fn encoder_backward(params: &PolicyParams, grad: &mut [f64], cloud: &PreparedCloud, arg: &[usize], gfeat: &[f64]) {
    let layers = &params.layout.encoder;
    let mut winners: Vec<usize> = arg.to_vec();
    winners.sort_unstable();
    winners.dedup();
    for &pi in &winners {
        let p = &cloud.points[pi];
        let acts = point_forward(&params.data, layers, p);
        let mut g: Vec<f64> = (0..gfeat.len())
            .map(|j| if arg[j] == pi { gfeat[j] } else { 0.0 })
            .collect();
        for i in (0..layers.len()).rev() {
            for (gv, a) in g.iter_mut().zip(&acts[i]) {
                *gv *= squash_grad(*a);
            }
            let x: &[f64] = if i == 0 { p } else { &acts[i - 1] };
            let mut gin = vec![0.0; layers[i].inp];
            dense_backward(&params.data, grad, &layers[i], x, &g, &mut gin);
            g = gin;
        }
    }
}

/// Mean loss over `batch` without gradients.
pub fn loss(params: &PolicyParams, batch: &[PreparedSample], noise_seed: u64) -> Result<LossReport, PolicyError> {
    loss_inner(params, batch, noise_seed, None)
}

/// Mean loss over `batch` and its gradient with respect to every parameter.
pub fn loss_and_grad(
    params: &PolicyParams,
    batch: &[PreparedSample],
    noise_seed: u64,
) -> Result<(LossReport, Vec<f64>), PolicyError> {
    let mut g = vec![0.0; params.len()];
    let r = loss_inner(params, batch, noise_seed, Some(&mut g))?;
    Ok((r, g))
}

fn loss_inner(
    params: &PolicyParams,
    batch: &[PreparedSample],
    noise_seed: u64,
    mut grad: Option<&mut Vec<f64>>,
) -> Result<LossReport, PolicyError> {
    if batch.is_empty() {
        return Err(PolicyError::EmptyDataset);
    }
    let mut acc = LossReport::default();
    for (i, s) in batch.iter().enumerate() {
        let r = sample_loss(params, s, i, noise_seed, grad.as_deref_mut().map(|g| g.as_mut_slice()))?;
        acc.total += r.total;
        acc.object += r.object;
        acc.head += r.head;
        acc.termination += r.termination;
    }
    let n = batch.len() as f64;
    if let Some(g) = grad {
        g.iter_mut().for_each(|v| *v /= n);
    }
    Ok(LossReport {
        total: acc.total / n,
        object: acc.object / n,
        head: acc.head / n,
        termination: acc.termination / n,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Largest relative error per parameter block.
    pub per_block: Vec<(String, f64)>,
    pub checked: usize,
}

/// Compares analytic gradients with central differences. With `per_block`
/// set, only that many randomly chosen entries of each block are checked.
pub fn gradient_check(
    params: &PolicyParams,
    batch: &[PreparedSample],
    noise_seed: u64,
    step: f64,
    per_block: Option<usize>,
    seed: u64,
) -> Result<GradCheck, PolicyError> {
    let (_, g) = loss_and_grad(params, batch, noise_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = params.clone();
    let mut out = Vec::new();
    let mut checked = 0;
    let mut worst = 0.0f64;
    for (name, off, len) in params.block_ranges() {
        let entries: Vec<usize> = match per_block {
            Some(n) if n < len => index::sample(&mut rng, len, n).into_vec(),
            _ => (0..len).collect(),
        };
        let mut block_worst = 0.0f64;
        for e in entries {
            let i = off + e;
            let orig = p.data[i];
            p.data[i] = orig + step;
            let lp = loss(&p, batch, noise_seed)?.total;
            p.data[i] = orig - step;
            let lm = loss(&p, batch, noise_seed)?.total;
            p.data[i] = orig;
            let fd = (lp - lm) / (2.0 * step);
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-7);
            block_worst = block_worst.max(rel);
            checked += 1;
        }
        worst = worst.max(block_worst);
        out.push((name, block_worst));
    }
    Ok(GradCheck {
        max_rel_error: worst,
        per_block: out,
        checked,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyOutput {
    /// Object trajectory in the config's representation.
    pub obj_traj: Vec<Pose>,
    pub object_rep: ObjectRep,
    pub head_traj: HeadTrajRel,
    pub terminal_score: f64,
    pub subsample_seed: u64,
}

impl PolicyOutput {
    /// World-frame object trajectory; relative outputs need the current object pose.
    pub fn object_world(&self, current: Option<&Pose>) -> Result<Vec<Pose>, PolicyError> {
        match self.object_rep {
            ObjectRep::Absolute => Ok(self.obj_traj.clone()),
            ObjectRep::Relative => {
                let c = current.ok_or(PolicyError::ConditioningMismatch)?;
                Ok(crate::traj::rel_to_abs(
                    c,
                    &HeadTrajRel {
                        deltas: self.obj_traj.clone(),
                    },
                ))
            }
        }
    }
}

fn decode_traj(raw: &[f64], offset: &Vec3, scale: f64, horizon: usize) -> Vec<Pose> {
    (0..horizon)
        .map(|k| {
            let s = decode_step(&raw[POSE_DIM * k..POSE_DIM * (k + 1)], offset, scale);
            matrix_to_pose(&s.r, s.t)
        })
        .collect()
}

fn termination_score(params: &PolicyParams, ctx: &[f64]) -> f64 {
    let acts = mlp_forward(&params.data, &params.layout.term, ctx);
    sigmoid(acts.last().expect("termination head")[0])
}

/// Policy inference. `current_obj_pose` is required when the config is
/// conditioned on it and is never read otherwise. Denoising heads sample
/// with the config seed.
pub fn predict(
    params: &PolicyParams,
    cloud: &LabeledCloud,
    current_obj_pose: Option<&Pose>,
) -> Result<PolicyOutput, PolicyError> {
    match params.cfg.head {
        HeadType::Regression => {
            let cfg = &params.cfg;
            let prepared = prepare_cloud(cloud, cfg)?;
            let (feat, _) = encode_prepared(params, &prepared);
            let ctx = context(params, &feat, current_obj_pose)?;
            let raw_obj = mlp_forward(&params.data, &params.layout.obj, &ctx).pop().expect("layers");
            let raw_head = mlp_forward(&params.data, &params.layout.head, &ctx).pop().expect("layers");
            Ok(PolicyOutput {
                obj_traj: decode_traj(&raw_obj, &obj_offset(cfg), cfg.workspace_scale, cfg.horizon),
                object_rep: cfg.object_rep,
                head_traj: HeadTrajRel {
                    deltas: decode_traj(&raw_head, &Vec3::zeros(), cfg.workspace_scale, cfg.horizon),
                },
                terminal_score: termination_score(params, &ctx),
                subsample_seed: prepared.subsample_seed,
            })
        }
        HeadType::Denoising => sample_denoising(params, cloud, current_obj_pose, params.cfg.seed, 1.0),
    }
}

/// Ancestral sampling from both denoising heads, starting from seeded noise
/// scaled by `noise_scale` (0 gives a deterministic, seed-independent output).
pub fn sample_denoising(
    params: &PolicyParams,
    cloud: &LabeledCloud,
    current_obj_pose: Option<&Pose>,
    seed: u64,
    noise_scale: f64,
) -> Result<PolicyOutput, PolicyError> {
    let cfg = &params.cfg;
    if cfg.head != HeadType::Denoising {
        return Err(PolicyError::HeadType(HeadType::Denoising));
    }
    let prepared = prepare_cloud(cloud, cfg)?;
    let (feat, _) = encode_prepared(params, &prepared);
    let ctx = context(params, &feat, current_obj_pose)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw_obj = denoise(params, &params.layout.obj, &ctx, &mut rng, noise_scale);
    let raw_head = denoise(params, &params.layout.head, &ctx, &mut rng, noise_scale);
    Ok(PolicyOutput {
        obj_traj: decode_traj(&raw_obj, &obj_offset(cfg), cfg.workspace_scale, cfg.horizon),
        object_rep: cfg.object_rep,
        head_traj: HeadTrajRel {
            deltas: decode_traj(&raw_head, &Vec3::zeros(), cfg.workspace_scale, cfg.horizon),
        },
        terminal_score: termination_score(params, &ctx),
        subsample_seed: prepared.subsample_seed,
    })
}

/// The head predicts the clean trajectory; each step samples the Gaussian posterior.
fn denoise(params: &PolicyParams, layers: &[Dense], ctx: &[f64], rng: &mut ChaCha8Rng, noise_scale: f64) -> Vec<f64> {
    let cfg = &params.cfg;
    let d = cfg.traj_dim();
    let sched = Schedule::linear(cfg.denoise_steps);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let mut x: Vec<f64> = (0..d).map(|_| normal(rng) * noise_scale).collect();
    let mut input = Vec::with_capacity(ctx.len() + d + TIME_EMB);
    for k in (0..cfg.denoise_steps).rev() {
        input.clear();
        input.extend_from_slice(ctx);
        input.extend_from_slice(&x);
        input.extend(time_embedding(k, cfg.denoise_steps));
        let x0 = mlp_forward(&params.data, layers, &input).pop().expect("layers");
        if k == 0 {
            return x0;
        }
        let (beta, ab, ab_prev) = (sched.beta[k], sched.alpha_bar[k], sched.alpha_bar[k - 1]);
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ck = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
        for i in 0..d {
            x[i] = c0 * x0[i] + ck * x[i] + sigma * normal(rng) * noise_scale;
        }
    }
    x
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of training after which the learning rate drops by `lr_decay`.
    pub decay_after: f64,
    pub lr_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 32,
            learning_rate: 1e-3,
            decay_after: 0.7,
            lr_decay: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean minibatch loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub steps: usize,
    /// Loss over the whole dataset after training.
    pub final_loss: LossReport,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Minibatch Adam with a single step-decay of the learning rate. Deterministic
/// for a given dataset, config seed and training config.
pub fn train(
    dataset: &[PreparedSample],
    cfg: &PolicyConfig,
    tcfg: &TrainConfig,
) -> Result<(PolicyParams, TrainHistory), PolicyError> {
    train_with_progress(dataset, cfg, tcfg, |_, _| {})
}

pub fn train_with_progress(
    dataset: &[PreparedSample],
    cfg: &PolicyConfig,
    tcfg: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<(PolicyParams, TrainHistory), PolicyError> {
    if dataset.is_empty() {
        return Err(PolicyError::EmptyDataset);
    }
    let mut params = PolicyParams::init(cfg)?;
    let mut adam = Adam::new(params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let bs = tcfg.batch_size.max(1).min(dataset.len());
    let per_epoch = dataset.len().div_ceil(bs);
    let total = per_epoch * tcfg.epochs;
    let decay_step = (tcfg.decay_after * total as f64) as usize;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(tcfg.epochs);
    let mut step = 0;
    let mut batch = Vec::with_capacity(bs);
    for epoch in 0..tcfg.epochs {
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut sum = 0.0;
        for chunk in order.chunks(bs) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| dataset[i].clone()));
            let noise_seed = cfg.seed ^ (step as u64).wrapping_mul(0x2545_f491_4f6c_dd1d);
            let (r, g) = loss_and_grad(&params, &batch, noise_seed)?;
            if !r.total.is_finite() || g.iter().any(|v| !v.is_finite()) {
                return Err(PolicyError::Diverged { step, loss: r.total });
            }
            let lr = if step >= decay_step {
                tcfg.learning_rate * tcfg.lr_decay
            } else {
                tcfg.learning_rate
            };
            adam.step(&mut params.data, &g, lr);
            sum += r.total;
            step += 1;
        }
        let mean = sum / per_epoch as f64;
        progress(epoch, mean);
        history.push(mean);
    }
    let final_loss = loss(&params, dataset, cfg.seed)?;
    Ok((
        params,
        TrainHistory {
            epoch_loss: history,
            steps: step,
            final_loss,
        },
    ))
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    config: PolicyConfig,
    blocks: Vec<Block>,
    param_count: usize,
}

/// `u32` header length, JSON header, then little-endian `f32` parameters in block order.
pub fn save_checkpoint<W: Write>(mut w: W, params: &PolicyParams) -> Result<(), PolicyError> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: params.cfg.clone(),
        blocks: params.layout.blocks.clone(),
        param_count: params.len(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::with_capacity(params.len() * 4);
    for v in &params.data {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint<R: Read>(mut r: R) -> Result<PolicyParams, PolicyError> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(PolicyError::Checkpoint(format!("unknown format `{}`", header.format)));
    }
    if header.version != CHECKPOINT_VERSION {
        return Err(PolicyError::Checkpoint(format!(
            "version {} is incompatible with {CHECKPOINT_VERSION}",
            header.version
        )));
    }
    header.config.validate()?;
    let layout = Layout::new(&header.config);
    if layout.blocks != header.blocks || layout.len != header.param_count {
        return Err(PolicyError::Checkpoint("block layout does not match config".into()));
    }
    let mut raw = vec![0u8; layout.len * 4];
    r.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
        .collect();
    Ok(PolicyParams {
        cfg: header.config,
        data,
        layout,
    })
}

/// Rounds every parameter through `f32`, matching what a checkpoint stores.
pub fn quantize(params: &PolicyParams) -> PolicyParams {
    PolicyParams {
        data: params.data.iter().map(|v| *v as f32 as f64).collect(),
        ..params.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::traj::DEFAULT_HORIZON;

    fn small_cfg() -> PolicyConfig {
        PolicyConfig {
            horizon: 3,
            encoder_widths: vec![8, 12],
            head_hidden: 10,
            seed: 7,
            ..PolicyConfig::default()
        }
    }

    fn random_pose(rng: &mut impl Rng, spread: f64) -> Pose {
        Pose::from_rotation_vector(
            &Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
            Vec3::new(rng.random_range(0.0..spread), rng.random_range(0.0..spread), rng.random_range(0.0..spread)),
        )
    }

    fn random_cloud(rng: &mut impl Rng, n: usize) -> LabeledCloud {
        let mut c = LabeledCloud::new(
            (0..n)
                .map(|_| Vec3::new(rng.random_range(0.0..0.6), rng.random_range(0.0..0.6), rng.random_range(0.0..0.3)))
                .collect(),
            FrameTag::World,
        );
        c.colors = Some((0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect());
        c
    }

    fn random_sample(rng: &mut impl Rng, h: usize) -> TrainingSample {
        TrainingSample {
            cloud_ref: String::new(),
            obj_abs: (0..h).map(|_| random_pose(rng, 0.5)).collect(),
            head_rel: (0..h).map(|_| random_pose(rng, 0.1)).collect(),
            terminal: rng.random_range(0..2),
            current_obj_pose: random_pose(rng, 0.5),
        }
    }

    fn batch(cfg: &PolicyConfig, n: usize, seed: u64) -> Vec<PreparedSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let cloud = random_cloud(&mut rng, 60);
                prepare_sample(&random_sample(&mut rng, cfg.horizon), &cloud, cfg).unwrap()
            })
            .collect()
    }

    #[test]
    fn encoder_is_permutation_invariant_bitwise() {
        let cfg = PolicyConfig::default();
        let params = PolicyParams::init(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cloud = random_cloud(&mut rng, 3000);
        let mut perm = cloud.clone();
        let n = perm.points.len();
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        perm.points = order.iter().map(|&i| cloud.points[i]).collect();
        perm.colors = Some(order.iter().map(|&i| cloud.colors.as_ref().unwrap()[i]).collect());
        let a = encode(&params, &cloud).unwrap();
        let b = encode(&params, &perm).unwrap();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());

        let mut doubled = cloud.clone();
        doubled.points.extend(cloud.points.iter().take(700));
        doubled.colors.as_mut().unwrap().extend(cloud.colors.as_ref().unwrap().iter().take(700));
        let c = encode(&params, &doubled).unwrap();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), c.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn single_point_feature_is_its_own_map() {
        let cfg = PolicyConfig::default();
        let params = PolicyParams::init(&cfg).unwrap();
        let mut c = LabeledCloud::new(vec![Vec3::new(0.3, 0.2, 0.1)], FrameTag::World);
        c.colors = Some(vec![[255, 0, 128]]);
        let prepared = prepare_cloud(&c, &cfg).unwrap();
        assert_eq!(encode(&params, &c).unwrap(), point_feature(&params, &prepared.points[0]));
        assert!(matches!(
            encode(&params, &LabeledCloud::new(vec![], FrameTag::World)),
            Err(PolicyError::EmptyCloud)
        ));
        assert!(matches!(
            encode(&params, &LabeledCloud::new(vec![Vec3::zeros()], FrameTag::Camera)),
            Err(PolicyError::NotWorld)
        ));
    }

    #[test]
    fn untrained_output_has_valid_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cloud = random_cloud(&mut rng, 500);
        for (_, cfg) in PolicyConfig::ablations(&PolicyConfig::default()) {
            let params = PolicyParams::init(&cfg).unwrap();
            let pose = random_pose(&mut rng, 0.5);
            let out = predict(&params, &cloud, Some(&pose)).unwrap();
            assert_eq!(out.obj_traj.len(), DEFAULT_HORIZON);
            assert_eq!(out.head_traj.deltas.len(), DEFAULT_HORIZON);
            assert!(out.obj_traj.iter().chain(&out.head_traj.deltas).all(Pose::is_finite));
            assert!((0.0..=1.0).contains(&out.terminal_score));
            if cfg.condition_on_current_pose {
                assert!(matches!(predict(&params, &cloud, None), Err(PolicyError::ConditioningMismatch)));
            }
        }
    }

    #[test]
    fn unconditioned_policy_never_reads_the_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cloud = random_cloud(&mut rng, 400);
        let params = PolicyParams::init(&PolicyConfig::default()).unwrap();
        let a = predict(&params, &cloud, None).unwrap();
        let b = predict(&params, &cloud, Some(&random_pose(&mut rng, 0.5))).unwrap();
        let nan = Pose::from_wxyz([1.0, 0.0, 0.0, 0.0], [f64::NAN; 3]);
        let c = predict(&params, &cloud, Some(&nan)).unwrap();
        for o in [&b, &c] {
            assert_eq!(format!("{a:?}"), format!("{o:?}"));
        }
    }

    #[test]
    fn equal_prediction_and_target_give_zero_pose_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let offset = Vec3::new(0.35, 0.35, 0.15);
        for _ in 0..100 {
            let raw: Vec<f64> = (0..POSE_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
            let target = decode_step(&raw, &offset, 0.25);
            let mut g = [0.0; POSE_DIM];
            assert_eq!(step_loss(&raw, &target, &offset, 0.25, 100.0, &mut g), 0.0);
            assert!(g.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn bce_at_even_odds_is_ln2() {
        let (l, g) = bce_with_logit(0.0, 1.0);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((g + 0.5).abs() < 1e-15);
        let (l, _) = bce_with_logit(-800.0, 1.0);
        assert!((l - 800.0).abs() < 1e-9);
    }

    #[test]
    fn rotation_loss_is_squared_geodesic_angle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let a = random_pose(&mut rng, 1e-9);
            let b = random_pose(&mut rng, 1e-9);
            let ra = a.rotation_matrix();
            let raw = [0.0, 0.0, 0.0, ra[(0, 0)], ra[(1, 0)], ra[(2, 0)], ra[(0, 1)], ra[(1, 1)], ra[(2, 1)]];
            let mut g = [0.0; POSE_DIM];
            let l = step_loss(&raw, &StepTarget::from_pose(&b), &Vec3::zeros(), 1.0, 1.0, &mut g);
            let angle = a.angle_to(&b);
            assert!((l - angle * angle).abs() < 1e-9, "{l} vs {}", angle * angle);
        }
    }

    #[test]
    fn gradients_match_finite_differences_small_nets() {
        for (i, (_, cfg)) in PolicyConfig::ablations(&small_cfg()).into_iter().enumerate() {
            let params = PolicyParams::init(&cfg).unwrap();
            let b = batch(&cfg, 3, 10 + i as u64);
            let check = gradient_check(&params, &b, 99, 1e-5, None, 0).unwrap();
            assert!(check.max_rel_error < 1e-4, "{:?}", check.per_block);
        }
        let cfg = PolicyConfig {
            head: HeadType::Denoising,
            denoise_steps: 5,
            ..small_cfg()
        };
        let params = PolicyParams::init(&cfg).unwrap();
        let check = gradient_check(&params, &batch(&cfg, 3, 20), 5, 1e-5, None, 0).unwrap();
        assert!(check.max_rel_error < 1e-4, "{:?}", check.per_block);
    }

    #[test]
    fn memorizes_a_single_sample() {
        let cfg = PolicyConfig {
            encoder_widths: vec![16, 32],
            head_hidden: 64,
            horizon: 4,
            ..PolicyConfig::default()
        };
        let data = batch(&cfg, 1, 30);
        let tcfg = TrainConfig {
            epochs: 2000,
            batch_size: 1,
            learning_rate: 3e-3,
            decay_after: 0.8,
            lr_decay: 0.1,
        };
        let (params, hist) = train(&data, &cfg, &tcfg).unwrap();
        assert_eq!(hist.steps, 2000);
        assert!(hist.final_loss.total < 1e-4, "{:?}", hist.final_loss);
        let (_, again) = train(&data, &cfg, &tcfg).unwrap();
        assert_eq!(hist, again);
        assert!(params.is_finite());
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = small_cfg();
        let params = PolicyParams::init(&cfg).unwrap();
        let mut buf = Vec::new();
        save_checkpoint(&mut buf, &params).unwrap();
        let back = load_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, quantize(&params));
        let mut again = Vec::new();
        save_checkpoint(&mut again, &back).unwrap();
        assert_eq!(buf, again);
        buf[4..].iter_mut().take(20).for_each(|b| *b = b' ');
        assert!(load_checkpoint(buf.as_slice()).is_err());
    }

    #[test]
    fn zero_noise_sampling_is_seed_independent() {
        let cfg = PolicyConfig {
            head: HeadType::Denoising,
            ..small_cfg()
        };
        let params = PolicyParams::init(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cloud = random_cloud(&mut rng, 100);
        let a = sample_denoising(&params, &cloud, None, 1, 0.0).unwrap();
        let b = sample_denoising(&params, &cloud, None, 2, 0.0).unwrap();
        assert_eq!(a, b);
        let c = sample_denoising(&params, &cloud, None, 3, 1.0).unwrap();
        let d = sample_denoising(&params, &cloud, None, 3, 1.0).unwrap();
        assert_eq!(c, d);
        assert_ne!(a, c);
        let reg = PolicyParams::init(&small_cfg()).unwrap();
        assert!(matches!(
            sample_denoising(&reg, &cloud, None, 1, 1.0),
            Err(PolicyError::HeadType(HeadType::Denoising))
        ));
    }

    fn fit_one(cfg: &PolicyConfig, sample: &TrainingSample, cloud: &LabeledCloud) -> PolicyParams {
        let data = vec![prepare_sample(sample, cloud, cfg).unwrap()];
        let tcfg = TrainConfig {
            epochs: 2000,
            batch_size: 1,
            learning_rate: 3e-3,
            decay_after: 0.8,
            lr_decay: 0.1,
        };
        train(&data, cfg, &tcfg).unwrap().0
    }

    #[test]
    fn fitted_relative_and_absolute_models_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let base = PolicyConfig {
            encoder_widths: vec![16, 32],
            head_hidden: 64,
            horizon: 4,
            ..PolicyConfig::default()
        };
        let cloud = random_cloud(&mut rng, 80);
        let sample = random_sample(&mut rng, base.horizon);
        let abs = fit_one(&base, &sample, &cloud);
        let rel_cfg = PolicyConfig {
            object_rep: ObjectRep::Relative,
            ..base.clone()
        };
        let rel = fit_one(&rel_cfg, &sample, &cloud);
        let out_abs = predict(&abs, &cloud, None).unwrap();
        let out_rel = predict(&rel, &cloud, None).unwrap();
        let world = out_rel.object_world(Some(&sample.current_obj_pose)).unwrap();
        for (k, target) in sample.obj_abs.iter().enumerate() {
            for p in [&out_abs.obj_traj[k], &world[k]] {
                assert!((p.translation() - target.translation()).norm() < 1e-3);
                assert!(p.angle_to(target) < 1e-3);
            }
        }
        for (p, t) in out_abs.head_traj.deltas.iter().zip(&sample.head_rel) {
            assert!((p.translation() - t.translation()).norm() < 1e-3 && p.angle_to(t) < 1e-3);
        }
        assert!((out_abs.terminal_score - sample.terminal as f64).abs() < 1e-2);
    }

    #[test]
    fn relative_targets_mapped_back_give_identical_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let offset = Vec3::new(0.35, 0.35, 0.15);
        for _ in 0..20 {
            let sample = random_sample(&mut rng, 6);
            let rel = crate::traj::abs_to_rel(&sample.current_obj_pose, &sample.obj_abs);
            let back = crate::traj::rel_to_abs(&sample.current_obj_pose, &rel);
            for (a, b) in sample.obj_abs.iter().zip(&back) {
                let raw: Vec<f64> = (0..POSE_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
                let mut g = [0.0; POSE_DIM];
                let la = step_loss(&raw, &StepTarget::from_pose(a), &offset, 0.25, 100.0, &mut g);
                let lb = step_loss(&raw, &StepTarget::from_pose(b), &offset, 0.25, 100.0, &mut g);
                assert!((la - lb).abs() < 1e-12, "{la} {lb}");
            }
        }
    }

    #[test]
    fn denoiser_recovers_both_modes() {
        let cfg = PolicyConfig {
            horizon: 1,
            encoder_widths: vec![8],
            head_hidden: 64,
            head: HeadType::Denoising,
            seed: 3,
            ..PolicyConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let cloud = random_cloud(&mut rng, 30);
        let modes = [0.25, 0.45];
        let data: Vec<PreparedSample> = modes
            .iter()
            .map(|&x| {
                let s = TrainingSample {
                    cloud_ref: String::new(),
                    obj_abs: vec![Pose::from_translation(Vec3::new(x, 0.3, 0.1))],
                    head_rel: vec![Pose::identity()],
                    terminal: 0,
                    current_obj_pose: Pose::identity(),
                };
                prepare_sample(&s, &cloud, &cfg).unwrap()
            })
            .cycle()
            .take(32)
            .collect();
        let tcfg = TrainConfig {
            epochs: 8000,
            batch_size: 32,
            learning_rate: 2e-3,
            decay_after: 0.8,
            lr_decay: 0.1,
        };
        let (params, _) = train(&data, &cfg, &tcfg).unwrap();
        let n = 1000;
        let mut hits = [0usize; 2];
        for seed in 0..n as u64 {
            let x = sample_denoising(&params, &cloud, None, seed, 1.0).unwrap().obj_traj[0].translation().x;
            let near = if (x - modes[0]).abs() < (x - modes[1]).abs() { 0 } else { 1 };
            if (x - modes[near]).abs() < 0.05 {
                hits[near] += 1;
            }
        }
        for h in hits {
            let f = h as f64 / n as f64;
            assert!((f - 0.5).abs() <= 0.1, "mode counts {hits:?}");
        }
    }
}

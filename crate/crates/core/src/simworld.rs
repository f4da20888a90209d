//! Synthetic tabletop world: analytic primitives, ray-cast depth/mask/color
//! rendering, oracle object poses, scripted demonstrations and scene
//! randomization. Stands in for the stereo depth, segmentation and pose
//! estimation providers.

use std::collections::HashSet;

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calib::CalibrationRig;
use crate::cloud::{Aabb, ColorImage, DepthFrame, FrameTag, Intrinsics, LabeledCloud, Mask};
use crate::episode::RawFrame;
use crate::geometry::{Pose, Vec3};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("unknown primitive id `{0}`")]
    UnknownId(String),
    #[error("duplicate primitive id `{0}`")]
    DuplicateId(String),
    #[error("degenerate primitive `{0}`: dimensions must be positive")]
    Degenerate(String),
    #[error("waypoint `{phase}` at {position:?} lies outside the scene bounds")]
    Unreachable { phase: String, position: [f64; 3] },
    #[error("invalid script: {0}")]
    Script(String),
    #[error("object visible in only {visible} of {total} frames")]
    Visibility { visible: usize, total: usize },
    #[error("scene randomization still overlapping after {0} attempts")]
    Overlap(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Shape {
    Sphere { radius: f64 },
    /// Axis-aligned in the primitive frame.
    Box { half_extents: [f64; 3] },
    /// Axis along local z.
    Cylinder { radius: f64, half_height: f64 },
}

impl Shape {
    fn is_valid(&self) -> bool {
        match *self {
            Shape::Sphere { radius } => radius > 0.0,
            Shape::Box { half_extents } => half_extents.iter().all(|&h| h > 0.0),
            Shape::Cylinder {
                radius,
                half_height,
            } => radius > 0.0 && half_height > 0.0,
        }
    }

    fn bounding_radius(&self) -> f64 {
        match *self {
            Shape::Sphere { radius } => radius,
            Shape::Box { half_extents: h } => (h[0] * h[0] + h[1] * h[1] + h[2] * h[2]).sqrt(),
            Shape::Cylinder {
                radius,
                half_height,
            } => (radius * radius + half_height * half_height).sqrt(),
        }
    }

    /// Smallest ray parameter `t > 0` where the local-frame ray enters the shape.
    fn intersect(&self, o: &Vec3, d: &Vec3) -> Option<f64> {
        const EPS: f64 = 1e-12;
        match *self {
            Shape::Sphere { radius } => {
                let a = d.dot(d);
                let b = o.dot(d);
                let c = o.dot(o) - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t0 = (-b - sq) / a;
                let t1 = (-b + sq) / a;
                if t0 > EPS {
                    Some(t0)
                } else if t1 > EPS {
                    Some(t1)
                } else {
                    None
                }
            }
            Shape::Box { half_extents: h } => {
                let mut tmin = f64::NEG_INFINITY;
                let mut tmax = f64::INFINITY;
                for k in 0..3 {
                    if d[k].abs() < 1e-300 {
                        if o[k] < -h[k] || o[k] > h[k] {
                            return None;
                        }
                    } else {
                        let inv = 1.0 / d[k];
                        let (mut a, mut b) = ((-h[k] - o[k]) * inv, (h[k] - o[k]) * inv);
                        if a > b {
                            std::mem::swap(&mut a, &mut b);
                        }
                        tmin = tmin.max(a);
                        tmax = tmax.min(b);
                        if tmin > tmax {
                            return None;
                        }
                    }
                }
                if tmin > EPS {
                    Some(tmin)
                } else if tmax > EPS {
                    Some(tmax)
                } else {
                    None
                }
            }
            Shape::Cylinder {
                radius,
                half_height,
            } => {
                let mut best: Option<f64> = None;
                let mut consider = |t: f64| {
                    if t > EPS && best.is_none_or(|b| t < b) {
                        best = Some(t);
                    }
                };
                let a = d.x * d.x + d.y * d.y;
                if a > 1e-300 {
                    let b = o.x * d.x + o.y * d.y;
                    let c = o.x * o.x + o.y * o.y - radius * radius;
                    let disc = b * b - a * c;
                    if disc >= 0.0 {
                        let sq = disc.sqrt();
                        for t in [(-b - sq) / a, (-b + sq) / a] {
                            let z = o.z + t * d.z;
                            if z.abs() <= half_height {
                                consider(t);
                            }
                        }
                    }
                }
                if d.z.abs() > 1e-300 {
                    for cap in [-half_height, half_height] {
                        let t = (cap - o.z) / d.z;
                        let x = o.x + t * d.x;
                        let y = o.y + t * d.y;
                        if x * x + y * y <= radius * radius {
                            consider(t);
                        }
                    }
                }
                best
            }
        }
    }

    /// Penetration depth of a local-frame point (positive inside).
    fn inside_depth(&self, p: &Vec3) -> f64 {
        match *self {
            Shape::Sphere { radius } => radius - p.norm(),
            Shape::Box { half_extents: h } => (0..3)
                .map(|k| h[k] - p[k].abs())
                .fold(f64::INFINITY, f64::min),
            Shape::Cylinder {
                radius,
                half_height,
            } => (radius - (p.x * p.x + p.y * p.y).sqrt()).min(half_height - p.z.abs()),
        }
    }

    /// Deterministic surface samples with roughly `spacing` meters between them.
    fn surface_samples(&self, spacing: f64) -> Vec<Vec3> {
        let mut out = Vec::new();
        match *self {
            Shape::Sphere { radius } => {
                let n_lat = ((std::f64::consts::PI * radius / spacing).ceil() as usize).max(2);
                for i in 0..=n_lat {
                    let th = std::f64::consts::PI * i as f64 / n_lat as f64;
                    let ring = (2.0 * std::f64::consts::PI * radius * th.sin() / spacing)
                        .ceil()
                        .max(1.0) as usize;
                    for j in 0..ring {
                        let ph = 2.0 * std::f64::consts::PI * j as f64 / ring as f64;
                        out.push(
                            Vec3::new(th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos()) * radius,
                        );
                    }
                }
            }
            Shape::Box { half_extents: h } => {
                for axis in 0..3 {
                    let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
                    let na = ((2.0 * h[a] / spacing).ceil() as usize).max(1);
                    let nb = ((2.0 * h[b] / spacing).ceil() as usize).max(1);
                    for sign in [-1.0, 1.0] {
                        for i in 0..=na {
                            for j in 0..=nb {
                                let mut p = Vec3::zeros();
                                p[axis] = sign * h[axis];
                                p[a] = -h[a] + 2.0 * h[a] * i as f64 / na as f64;
                                p[b] = -h[b] + 2.0 * h[b] * j as f64 / nb as f64;
                                out.push(p);
                            }
                        }
                    }
                }
            }
            Shape::Cylinder {
                radius,
                half_height,
            } => {
                let nr = ((2.0 * std::f64::consts::PI * radius / spacing).ceil() as usize).max(3);
                let nz = ((2.0 * half_height / spacing).ceil() as usize).max(1);
                for i in 0..nr {
                    let ph = 2.0 * std::f64::consts::PI * i as f64 / nr as f64;
                    for j in 0..=nz {
                        out.push(Vec3::new(
                            radius * ph.cos(),
                            radius * ph.sin(),
                            -half_height + 2.0 * half_height * j as f64 / nz as f64,
                        ));
                    }
                    let rings = ((radius / spacing).ceil() as usize).max(1);
                    for r in 1..=rings {
                        let rr = radius * r as f64 / rings as f64;
                        for cap in [-half_height, half_height] {
                            out.push(Vec3::new(rr * ph.cos(), rr * ph.sin(), cap));
                        }
                    }
                }
                out.push(Vec3::new(0.0, 0.0, half_height));
                out.push(Vec3::new(0.0, 0.0, -half_height));
            }
        }
        out
    }

    pub fn local_corners(&self) -> Vec<Vec3> {
        let h = match *self {
            Shape::Sphere { radius } => [radius; 3],
            Shape::Box { half_extents } => half_extents,
            Shape::Cylinder {
                radius,
                half_height,
            } => [radius, radius, half_height],
        };
        let mut out = Vec::with_capacity(8);
        for sx in [-1.0, 1.0] {
            for sy in [-1.0, 1.0] {
                for sz in [-1.0, 1.0] {
                    out.push(Vec3::new(sx * h[0], sy * h[1], sz * h[2]));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub id: String,
    pub shape: Shape,
    /// Primitive frame to world.
    pub pose: Pose,
    #[serde(default = "default_color")]
    pub color: [u8; 3],
}

fn default_color() -> [u8; 3] {
    [160, 160, 160]
}

impl Primitive {
    pub fn new(id: &str, shape: Shape, pose: Pose, color: [u8; 3]) -> Self {
        Self {
            id: id.to_string(),
            shape,
            pose,
            color,
        }
    }

    /// World-frame ray parameter of the first hit.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        let inv = self.pose.inverse();
        self.shape.intersect(&inv.apply(origin), &inv.rotate(dir))
    }

    pub fn inside_depth(&self, p: &Vec3) -> f64 {
        self.shape.inside_depth(&self.pose.inverse().apply(p))
    }

    pub fn world_aabb(&self) -> Aabb {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for c in self.shape.local_corners() {
            let w = self.pose.apply(&c);
            for k in 0..3 {
                min[k] = min[k].min(w[k]);
                max[k] = max[k].max(w[k]);
            }
        }
        Aabb { min, max }
    }

    pub fn surface_points(&self, spacing: f64) -> Vec<Vec3> {
        self.shape
            .surface_samples(spacing)
            .iter()
            .map(|p| self.pose.apply(p))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SlotInsertion,
    Pour,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::SlotInsertion => "slot_insertion",
            TaskKind::Pour => "pour",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibSphere {
    pub center: [f64; 3],
    pub radius: f64,
}

/// A static tabletop scene. Coordinates are in the world frame defined by the
/// three calibration spheres (`b1` origin, `b2` on +x, `b0` on +y).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub task: TaskKind,
    /// `b0`, `b1`, `b2`.
    pub calib_spheres: [CalibSphere; 3],
    pub objects: Vec<Primitive>,
    pub occluders: Vec<Primitive>,
    /// Id of the object the demonstrator (or robot) moves.
    pub manipulated: String,
    /// Goal pose of the manipulated object.
    pub target: Pose,
    /// Ids of occluders that only support objects (e.g. the table) and are
    /// exempt from overlap checks.
    #[serde(default)]
    pub supports: Vec<String>,
    #[serde(default)]
    pub seed: u64,
}

pub const SPHERE_IDS: [&str; 3] = ["sphere0", "sphere1", "sphere2"];
pub const HAND_ID: &str = "hand";

const ORANGE: [u8; 3] = [255, 140, 0];

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        let mut seen = HashSet::new();
        for p in self.all_primitives() {
            if !p.shape.is_valid() {
                return Err(SimError::Degenerate(p.id.clone()));
            }
            if !seen.insert(p.id.clone()) {
                return Err(SimError::DuplicateId(p.id.clone()));
            }
        }
        if !self.objects.iter().any(|o| o.id == self.manipulated) {
            return Err(SimError::UnknownId(self.manipulated.clone()));
        }
        Ok(())
    }

    pub fn sphere_primitives(&self) -> Vec<Primitive> {
        self.calib_spheres
            .iter()
            .zip(SPHERE_IDS)
            .map(|(s, id)| {
                Primitive::new(
                    id,
                    Shape::Sphere { radius: s.radius },
                    Pose::from_translation(Vec3::from(s.center)),
                    ORANGE,
                )
            })
            .collect()
    }

    pub fn all_primitives(&self) -> Vec<Primitive> {
        let mut v = self.sphere_primitives();
        v.extend(self.objects.iter().cloned());
        v.extend(self.occluders.iter().cloned());
        v
    }

    pub fn primitive(&self, id: &str) -> Option<&Primitive> {
        self.objects
            .iter()
            .chain(self.occluders.iter())
            .find(|p| p.id == id)
    }

    pub fn object_pose(&self, id: &str) -> Result<Pose, SimError> {
        if let Some(i) = SPHERE_IDS.iter().position(|s| *s == id) {
            return Ok(Pose::from_translation(Vec3::from(
                self.calib_spheres[i].center,
            )));
        }
        self.primitive(id)
            .map(|p| p.pose)
            .ok_or_else(|| SimError::UnknownId(id.to_string()))
    }

    pub fn manipulated_object(&self) -> &Primitive {
        self.objects
            .iter()
            .find(|o| o.id == self.manipulated)
            .expect("validated scene has its manipulated object")
    }

    /// Copy of the scene with one object moved.
    pub fn with_object_pose(&self, id: &str, pose: Pose) -> Result<SceneSpec, SimError> {
        let mut s = self.clone();
        let prim = s
            .objects
            .iter_mut()
            .chain(s.occluders.iter_mut())
            .find(|p| p.id == id)
            .ok_or_else(|| SimError::UnknownId(id.to_string()))?;
        prim.pose = pose;
        Ok(s)
    }

    pub fn has_id(&self, id: &str) -> bool {
        SPHERE_IDS.contains(&id) || self.primitive(id).is_some()
    }

    /// Default book-into-shelf scene.
    pub fn slot_insertion_default() -> SceneSpec {
        let table_top = -SPHERE_RADIUS;
        let book_half = [0.015, 0.07, 0.09];
        let lift = 0.005;
        let book_z = table_top + book_half[2] + lift;
        let slot = Vec3::new(0.45, 0.45, book_z);
        let gap = 0.05;
        let nb_half = [0.02, 0.08, 0.10];
        let nb_z = table_top + nb_half[2];
        let side = gap / 2.0 + nb_half[0];
        SceneSpec {
            task: TaskKind::SlotInsertion,
            calib_spheres: default_spheres(),
            objects: vec![Primitive::new(
                "book",
                Shape::Box {
                    half_extents: book_half,
                },
                Pose::from_translation(Vec3::new(0.22, 0.22, book_z)),
                [200, 30, 30],
            )],
            occluders: vec![
                table(table_top),
                Primitive::new(
                    "shelf_left",
                    Shape::Box {
                        half_extents: nb_half,
                    },
                    Pose::from_translation(Vec3::new(slot.x - side, slot.y, nb_z)),
                    [40, 60, 170],
                ),
                Primitive::new(
                    "shelf_right",
                    Shape::Box {
                        half_extents: nb_half,
                    },
                    Pose::from_translation(Vec3::new(slot.x + side, slot.y, nb_z)),
                    [40, 140, 70],
                ),
                Primitive::new(
                    "shelf_back",
                    Shape::Box {
                        half_extents: [0.11, 0.01, 0.12],
                    },
                    Pose::from_translation(Vec3::new(slot.x, slot.y + 0.095, table_top + 0.12)),
                    [120, 80, 40],
                ),
            ],
            manipulated: "book".into(),
            target: Pose::from_translation(slot),
            supports: vec!["table".into()],
            seed: 0,
        }
    }

    /// Default pour scene: a bottle carried over a screen and tilted above a cup.
    pub fn pour_default() -> SceneSpec {
        let table_top = -SPHERE_RADIUS;
        let bottle_h = 0.08;
        let cup = Vec3::new(0.45, 0.42, table_top + 0.05);
        SceneSpec {
            task: TaskKind::Pour,
            calib_spheres: default_spheres(),
            objects: vec![
                Primitive::new(
                    "bottle",
                    Shape::Cylinder {
                        radius: 0.03,
                        half_height: bottle_h,
                    },
                    Pose::from_translation(Vec3::new(0.2, 0.2, table_top + bottle_h + 0.005)),
                    [30, 120, 220],
                ),
                Primitive::new(
                    "cup",
                    Shape::Cylinder {
                        radius: 0.04,
                        half_height: 0.05,
                    },
                    Pose::from_translation(cup),
                    [240, 240, 240],
                ),
            ],
            occluders: vec![
                table(table_top),
                Primitive::new(
                    "screen",
                    Shape::Box {
                        half_extents: [0.15, 0.01, 0.12],
                    },
                    Pose::from_translation(Vec3::new(0.35, 0.31, table_top + 0.12)),
                    [20, 20, 20],
                ),
            ],
            manipulated: "bottle".into(),
            // bottle mouth just above the cup rim, tilted 75° about x
            target: Pose::from_axis_angle(
                &Vec3::x(),
                75f64.to_radians(),
                cup + Vec3::new(0.0, -0.06, 0.16),
            ),
            supports: vec!["table".into()],
            seed: 0,
        }
    }

    /// Surface samples of every primitive, for PLY export.
    pub fn surface_cloud(&self, spacing: f64) -> LabeledCloud {
        let mut points = Vec::new();
        let mut colors = Vec::new();
        for p in self.all_primitives() {
            for s in p.surface_points(spacing) {
                points.push(s);
                colors.push(p.color);
            }
        }
        LabeledCloud {
            points,
            colors: Some(colors),
            frame: FrameTag::World,
            pixel_index: None,
        }
    }
}

/// Calibration spheres rest on the table, so their centers sit one radius above it.
pub const SPHERE_RADIUS: f64 = 0.03;

fn default_spheres() -> [CalibSphere; 3] {
    [
        CalibSphere {
            center: [0.0, 0.3, 0.0],
            radius: SPHERE_RADIUS,
        },
        CalibSphere {
            center: [0.0, 0.0, 0.0],
            radius: SPHERE_RADIUS,
        },
        CalibSphere {
            center: [0.3, 0.0, 0.0],
            radius: SPHERE_RADIUS,
        },
    ]
}

fn table(top: f64) -> Primitive {
    Primitive::new(
        "table",
        Shape::Box {
            half_extents: [0.9, 0.9, 0.01],
        },
        Pose::from_translation(Vec3::new(0.4, 0.4, top - 0.01)),
        [128, 128, 128],
    )
}

/// Nearest hit along a world ray: `(t, primitive index)`.
fn cast(prims: &[Primitive], inv_poses: &[Pose], origin: &Vec3, dir: &Vec3) -> Option<(f64, usize)> {
    let mut best: Option<(f64, usize)> = None;
    for (i, (p, inv)) in prims.iter().zip(inv_poses).enumerate() {
        // bounding-sphere cull
        let c = p.pose.translation() - origin;
        let r = p.shape.bounding_radius();
        let dn = dir.norm();
        let proj = c.dot(dir) / dn;
        if proj < -r || c.norm_squared() - proj * proj > r * r * (1.0 + 1e-9) + 1e-18 {
            continue;
        }
        let o = inv.apply(origin);
        let d = inv.rotate(dir);
        if let Some(t) = p.shape.intersect(&o, &d) {
            if best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, i));
            }
        }
    }
    best
}

/// Depth, color and hit-id buffers of one rendered view.
pub struct RenderedView {
    pub depth: DepthFrame,
    pub color: ColorImage,
    /// Index into `ids` of the primitive hit at each pixel.
    pub hit: Vec<Option<usize>>,
    pub ids: Vec<String>,
}

impl RenderedView {
    pub fn mask_of(&self, id: &str) -> Mask {
        let idx = self.ids.iter().position(|s| s == id);
        Mask {
            width: self.depth.width,
            height: self.depth.height,
            data: self
                .hit
                .iter()
                .map(|h| idx.is_some() && *h == idx)
                .collect(),
        }
    }
}

/// Renders the listed primitives from `cam_pose` (camera to world).
pub fn render_view(prims: &[Primitive], cam_pose: &Pose, intr: &Intrinsics) -> RenderedView {
    let inv_poses: Vec<Pose> = prims.iter().map(|p| p.pose.inverse()).collect();
    let n = intr.pixel_count();
    let mut depth = vec![f32::NAN; n];
    let mut color = vec![[0u8; 3]; n];
    let mut hit = vec![None; n];
    let origin = *cam_pose.translation();
    let r: Matrix3<f64> = cam_pose.rotation_matrix();
    for v in 0..intr.height {
        for u in 0..intr.width {
            let dir = r * intr.ray(u as f64, v as f64);
            if let Some((t, i)) = cast(prims, &inv_poses, &origin, &dir) {
                let idx = v * intr.width + u;
                // camera-frame ray has unit z, so the ray parameter is the depth
                depth[idx] = t as f32;
                color[idx] = prims[i].color;
                hit[idx] = Some(i);
            }
        }
    }
    RenderedView {
        depth: DepthFrame {
            width: intr.width,
            height: intr.height,
            data: depth,
        },
        color: ColorImage {
            width: intr.width,
            height: intr.height,
            data: color,
        },
        hit,
        ids: prims.iter().map(|p| p.id.clone()).collect(),
    }
}

pub fn render_depth(scene: &SceneSpec, cam_pose: &Pose, intr: &Intrinsics) -> DepthFrame {
    render_view(&scene.all_primitives(), cam_pose, intr).depth
}

/// Occlusion-aware mask of `target_id`.
pub fn render_mask(
    scene: &SceneSpec,
    cam_pose: &Pose,
    intr: &Intrinsics,
    target_id: &str,
) -> Result<Mask, SimError> {
    if !scene.has_id(target_id) {
        return Err(SimError::UnknownId(target_id.to_string()));
    }
    Ok(render_view(&scene.all_primitives(), cam_pose, intr).mask_of(target_id))
}

/// Depth along arbitrary (sub-pixel) image coordinates; misses are `NaN`.
pub fn render_depth_at(
    prims: &[Primitive],
    cam_pose: &Pose,
    intr: &Intrinsics,
    pixels: &[(f64, f64)],
) -> Vec<f64> {
    let inv_poses: Vec<Pose> = prims.iter().map(|p| p.pose.inverse()).collect();
    let origin = *cam_pose.translation();
    pixels
        .iter()
        .map(|&(u, v)| {
            let dir = cam_pose.rotate(&intr.ray(u, v));
            cast(prims, &inv_poses, &origin, &dir)
                .map(|(t, _)| t)
                .unwrap_or(f64::NAN)
        })
        .collect()
}

/// Gaussian perturbation of oracle poses: translation per axis (m), rotation
/// vector per axis (rad).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PoseNoise {
    pub sigma_translation: f64,
    pub sigma_rotation: f64,
}

/// Camera-frame pose of `target_id` (object to camera), optionally perturbed.
pub fn oracle_object_pose(
    scene: &SceneSpec,
    cam_pose: &Pose,
    target_id: &str,
    noise: &PoseNoise,
    rng: &mut impl Rng,
) -> Result<Pose, SimError> {
    let world = scene.object_pose(target_id)?;
    let exact = cam_pose.relative(&world);
    if noise.sigma_translation == 0.0 && noise.sigma_rotation == 0.0 {
        return Ok(exact);
    }
    let mut sample = |sigma: f64| -> Vec3 {
        if sigma == 0.0 {
            return Vec3::zeros();
        }
        let n = Normal::new(0.0, sigma).expect("finite sigma");
        Vec3::new(n.sample(rng), n.sample(rng), n.sample(rng))
    };
    let dt = sample(noise.sigma_translation);
    let dr = sample(noise.sigma_rotation);
    let rot = Pose::from_rotation_vector(&dr, Vec3::zeros());
    Ok(Pose::new(
        *rot.rotation() * exact.rotation(),
        exact.translation() + dt,
    ))
}

/// Where the object goes in one demonstration phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Waypoint {
    /// The object's initial pose, shifted in world axes.
    Start { offset: [f64; 3] },
    /// The target pose, shifted in world axes.
    Target { offset: [f64; 3] },
    /// The target pose composed with a relative pose in the target frame.
    TargetRelative { pose: Pose },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub name: String,
    pub object: Waypoint,
    /// Eye position at the end of the phase relative to the target position (world axes).
    pub eye_offset: [f64; 3],
    /// Fraction of the way from object to target the gaze rests on at phase end.
    pub focus_blend: f64,
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoScript {
    pub initial_eye: [f64; 3],
    pub initial_focus: [f64; 3],
    /// Uniform jitter half-width applied to the initial eye position.
    pub eye_jitter: f64,
    /// Hand sphere offset in the object frame.
    pub hand_offset: [f64; 3],
    pub hand_radius: f64,
    pub phases: Vec<Phase>,
}

impl DemoScript {
    pub fn validate(&self) -> Result<(), SimError> {
        for p in &self.phases {
            if !(p.duration > 0.0) {
                return Err(SimError::Script(format!(
                    "phase `{}` has non-positive duration",
                    p.name
                )));
            }
        }
        Ok(())
    }

    pub fn total_duration(&self) -> f64 {
        self.phases.iter().map(|p| p.duration).sum()
    }

    /// Lift, carry above the slot, lower in, hold.
    pub fn slot_insertion_default() -> DemoScript {
        DemoScript {
            initial_eye: [0.12, -0.38, 0.62],
            initial_focus: [0.25, 0.25, 0.0],
            eye_jitter: 0.03,
            hand_offset: [0.045, 0.0, 0.03],
            hand_radius: 0.035,
            phases: vec![
                Phase {
                    name: "lift".into(),
                    object: Waypoint::Start {
                        offset: [0.0, 0.0, 0.22],
                    },
                    eye_offset: [-0.30, -0.75, 0.50],
                    focus_blend: 0.4,
                    duration: 0.8,
                },
                Phase {
                    name: "approach".into(),
                    object: Waypoint::Target {
                        offset: [0.0, 0.0, 0.22],
                    },
                    eye_offset: [-0.22, -0.62, 0.42],
                    focus_blend: 0.8,
                    duration: 1.5,
                },
                Phase {
                    name: "insert".into(),
                    object: Waypoint::Target {
                        offset: [0.0, 0.0, 0.0],
                    },
                    eye_offset: [-0.12, -0.55, 0.32],
                    focus_blend: 1.0,
                    duration: 1.2,
                },
                Phase {
                    name: "hold".into(),
                    object: Waypoint::Target {
                        offset: [0.0, 0.0, 0.0],
                    },
                    eye_offset: [-0.12, -0.55, 0.32],
                    focus_blend: 1.0,
                    duration: 0.4,
                },
            ],
        }
    }

    /// Lift, pass over the screen, move above the cup, tilt and hold.
    pub fn pour_default() -> DemoScript {
        let tilt_back = Pose::from_axis_angle(&Vec3::x(), -75f64.to_radians(), Vec3::zeros());
        DemoScript {
            initial_eye: [0.12, -0.38, 0.62],
            initial_focus: [0.25, 0.25, 0.0],
            eye_jitter: 0.03,
            hand_offset: [0.05, 0.0, 0.0],
            hand_radius: 0.035,
            phases: vec![
                Phase {
                    name: "lift".into(),
                    object: Waypoint::Start {
                        offset: [0.0, 0.0, 0.25],
                    },
                    eye_offset: [-0.3, -0.7, 0.45],
                    focus_blend: 0.3,
                    duration: 0.8,
                },
                Phase {
                    name: "cross".into(),
                    object: Waypoint::TargetRelative { pose: tilt_back },
                    eye_offset: [-0.2, -0.6, 0.4],
                    focus_blend: 0.8,
                    duration: 1.5,
                },
                Phase {
                    name: "tilt".into(),
                    object: Waypoint::Target {
                        offset: [0.0, 0.0, 0.0],
                    },
                    eye_offset: [-0.15, -0.55, 0.35],
                    focus_blend: 1.0,
                    duration: 1.0,
                },
                Phase {
                    name: "hold".into(),
                    object: Waypoint::Target {
                        offset: [0.0, 0.0, 0.0],
                    },
                    eye_offset: [-0.15, -0.55, 0.35],
                    focus_blend: 1.0,
                    duration: 0.8,
                },
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamRates {
    pub frame_hz: f64,
    pub pose_hz: f64,
    /// Standard deviation of head-pose timestamp jitter, seconds.
    pub pose_jitter: f64,
}

impl Default for StreamRates {
    fn default() -> Self {
        Self {
            frame_hz: 10.0,
            pose_hz: 120.0,
            pose_jitter: 0.001,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoStreams {
    pub frames: Vec<RawFrame>,
    /// Glasses pose in the tracking frame at the pose-stream rate.
    pub head_poses: Vec<(f64, Pose)>,
    /// Ground truth per frame: object to world.
    pub object_world: Vec<Pose>,
    /// Ground truth per frame: camera to world.
    pub camera_world: Vec<Pose>,
    /// Ground truth: tracking frame to world.
    pub tracking_to_world: Pose,
    pub rig: CalibrationRig,
    pub intrinsics: Intrinsics,
    pub visible_fraction: f64,
}

/// Default camera used for demos and rollouts.
pub fn default_intrinsics() -> Intrinsics {
    Intrinsics {
        fx: 100.0,
        fy: 100.0,
        cx: 80.0,
        cy: 60.0,
        width: 160,
        height: 120,
    }
}

/// Continuous-time demonstration trajectories.
pub struct DemoPlan {
    knots_t: Vec<f64>,
    object: Vec<Pose>,
    eye: Vec<Vec3>,
    focus: Vec<Vec3>,
}

fn min_jerk(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)
}

impl DemoPlan {
    pub fn new(scene: &SceneSpec, script: &DemoScript, eye_jitter: Vec3) -> Result<Self, SimError> {
        script.validate()?;
        let start = scene.manipulated_object().pose;
        let target = scene.target;
        let bounds = Aabb {
            min: [-0.5, -0.5, -0.05],
            max: [1.3, 1.3, 1.2],
        };
        let mut knots_t = vec![0.0];
        let mut object = vec![start];
        let initial_eye = Vec3::from(script.initial_eye) + eye_jitter;
        let mut eye = vec![initial_eye];
        let mut focus = vec![Vec3::from(script.initial_focus)];
        let mut t = 0.0;
        for phase in &script.phases {
            let pose = match phase.object {
                Waypoint::Start { offset } => {
                    start.with_translation(start.translation() + Vec3::from(offset))
                }
                Waypoint::Target { offset } => {
                    target.with_translation(target.translation() + Vec3::from(offset))
                }
                Waypoint::TargetRelative { pose } => target.compose(&pose),
            };
            if !bounds.contains(pose.translation()) {
                return Err(SimError::Unreachable {
                    phase: phase.name.clone(),
                    position: [pose.translation().x, pose.translation().y, pose.translation().z],
                });
            }
            t += phase.duration;
            knots_t.push(t);
            object.push(pose);
            eye.push(target.translation() + Vec3::from(phase.eye_offset));
            let b = phase.focus_blend;
            focus.push(pose.translation() * (1.0 - b) + target.translation() * b);
        }
        Ok(Self {
            knots_t,
            object,
            eye,
            focus,
        })
    }

    pub fn duration(&self) -> f64 {
        *self.knots_t.last().expect("non-empty")
    }

    fn segment(&self, t: f64) -> (usize, f64) {
        let t = t.clamp(0.0, self.duration());
        for k in 1..self.knots_t.len() {
            if t <= self.knots_t[k] {
                let s = (t - self.knots_t[k - 1]) / (self.knots_t[k] - self.knots_t[k - 1]);
                return (k - 1, min_jerk(s));
            }
        }
        (self.knots_t.len().saturating_sub(2), 1.0)
    }

    pub fn object_at(&self, t: f64) -> Pose {
        if self.object.len() == 1 {
            return self.object[0];
        }
        let (k, s) = self.segment(t);
        self.object[k]
            .interpolate(&self.object[k + 1], s)
            .expect("min-jerk parameter lies in [0, 1]")
    }

    /// Glasses (head) pose in the world at time `t`.
    pub fn camera_at(&self, t: f64) -> Pose {
        let (eye, focus) = if self.eye.len() == 1 {
            (self.eye[0], self.focus[0])
        } else {
            let (k, s) = self.segment(t);
            (
                self.eye[k] + (self.eye[k + 1] - self.eye[k]) * s,
                self.focus[k] + (self.focus[k + 1] - self.focus[k]) * s,
            )
        };
        Pose::look_at(&eye, &focus, &Vec3::z())
    }
}

/// Default camera mount on the glasses (glasses to camera).
pub fn default_glass_to_cam() -> Pose {
    // camera 2 cm below and 3 cm ahead of the glasses origin, pitched 3°
    Pose::from_axis_angle(&Vec3::x(), 3f64.to_radians(), Vec3::new(0.0, 0.02, -0.03))
}

/// Proxy of the demonstrator's hand (or the robot's gripper) holding the object at `object`.
pub fn hand_primitive(script: &DemoScript, object: &Pose) -> Primitive {
    Primitive::new(
        HAND_ID,
        Shape::Sphere {
            radius: script.hand_radius,
        },
        Pose::from_translation(object.apply(&Vec3::from(script.hand_offset))),
        [230, 180, 150],
    )
}

/// Scripted demonstration with oracle providers.
pub fn generate_demo(
    scene: &SceneSpec,
    script: &DemoScript,
    rates: &StreamRates,
    intr: &Intrinsics,
    seed: u64,
) -> Result<DemoStreams, SimError> {
    scene.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Vec3::new(
        rng.random_range(-1.0..=1.0),
        rng.random_range(-1.0..=1.0),
        rng.random_range(-1.0..=1.0),
    ) * script.eye_jitter;
    let plan = DemoPlan::new(scene, script, jitter)?;
    let glass_to_cam = default_glass_to_cam();
    let cam_to_glass = glass_to_cam.inverse();
    // arbitrary tracking origin: head poses only matter through relative motion
    let tracking_to_world = Pose::from_axis_angle(
        &Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ),
        rng.random_range(-0.5..0.5),
        Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ),
    );
    let world_to_tracking = tracking_to_world.inverse();
    let head_world_at = |t: f64| plan.camera_at(t).compose(&glass_to_cam);

    let frame_dt = 1.0 / rates.frame_hz;
    let t0 = 0.05;
    let n_frames = (plan.duration() / frame_dt).round() as usize + 1;

    let pose_dt = 1.0 / rates.pose_hz;
    let t_end = t0 + (n_frames - 1) as f64 * frame_dt + 0.05;
    let jitter_dist = Normal::new(0.0, rates.pose_jitter.max(0.0)).expect("finite jitter");
    let mut head_poses = Vec::new();
    let mut k = 0usize;
    loop {
        let nominal = k as f64 * pose_dt;
        if nominal > t_end + pose_dt {
            break;
        }
        let jit = if rates.pose_jitter > 0.0 {
            jitter_dist.sample(&mut rng).clamp(-0.4 * pose_dt, 0.4 * pose_dt)
        } else {
            0.0
        };
        let ts = (nominal + jit).max(0.0);
        if head_poses.last().is_none_or(|(last, _): &(f64, Pose)| ts > *last) {
            head_poses.push((ts, world_to_tracking.compose(&head_world_at(ts - t0))));
        }
        k += 1;
    }

    let obj_id = scene.manipulated.clone();
    let mut frames = Vec::with_capacity(n_frames);
    let mut object_world = Vec::with_capacity(n_frames);
    let mut camera_world = Vec::with_capacity(n_frames);
    let mut visible = 0;
    for i in 0..n_frames {
        let t = i as f64 * frame_dt;
        let obj = plan.object_at(t);
        let cam = head_world_at(t).compose(&cam_to_glass);
        let frame_scene = scene.with_object_pose(&obj_id, obj)?;
        let mut prims = frame_scene.all_primitives();
        prims.push(hand_primitive(script, &obj));
        let view = render_view(&prims, &cam, intr);
        let object_mask = view.mask_of(&obj_id);
        let hand_mask = view.mask_of(HAND_ID);
        let seen = object_mask.count() > 0;
        if seen {
            visible += 1;
        }
        frames.push(RawFrame {
            timestamp: t0 + t,
            depth: view.depth,
            color: Some(view.color),
            hand_mask,
            object_mask,
            object_pose_cam: seen.then(|| cam.relative(&obj)),
        });
        object_world.push(obj);
        camera_world.push(cam);
    }
    let visible_fraction = visible as f64 / n_frames as f64;
    if visible_fraction < 0.9 {
        return Err(SimError::Visibility {
            visible,
            total: n_frames,
        });
    }
    let spheres = scene.calib_spheres;
    let cam0 = camera_world[0];
    let rig = CalibrationRig {
        sphere_radius: spheres[0].radius,
        sphere_centers_cam0: spheres.map(|s| cam0.inverse().apply(&Vec3::from(s.center))),
        glass_to_cam,
    };
    Ok(DemoStreams {
        frames,
        head_poses,
        object_world,
        camera_world,
        tracking_to_world,
        rig,
        intrinsics: *intr,
        visible_fraction,
    })
}

/// Per-group uniform pose randomization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomGroup {
    /// Primitive ids moved together.
    pub ids: Vec<String>,
    /// Whether the target pose moves with this group.
    #[serde(default)]
    pub include_target: bool,
    /// Half-widths of the uniform translation offset, meters.
    pub translation: [f64; 3],
    /// Half-width of the uniform yaw offset about the group anchor, radians.
    #[serde(default)]
    pub yaw: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RandomizationRanges {
    pub groups: Vec<RandomGroup>,
}

impl RandomizationRanges {
    pub fn slot_default() -> Self {
        Self {
            groups: vec![
                RandomGroup {
                    ids: vec![
                        "shelf_left".into(),
                        "shelf_right".into(),
                        "shelf_back".into(),
                    ],
                    include_target: true,
                    translation: [0.05, 0.05, 0.0],
                    yaw: 0.0,
                },
                RandomGroup {
                    ids: vec!["book".into()],
                    include_target: false,
                    translation: [0.04, 0.04, 0.0],
                    yaw: 0.2,
                },
            ],
        }
    }

    pub fn pour_default() -> Self {
        Self {
            groups: vec![
                RandomGroup {
                    ids: vec!["cup".into()],
                    include_target: true,
                    translation: [0.03, 0.02, 0.0],
                    yaw: 0.0,
                },
                RandomGroup {
                    ids: vec!["bottle".into()],
                    include_target: false,
                    translation: [0.03, 0.03, 0.0],
                    yaw: 0.0,
                },
            ],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.groups
            .iter()
            .all(|g| g.translation.iter().all(|&v| v == 0.0) && g.yaw == 0.0)
    }
}

fn aabb_overlap(a: &Aabb, b: &Aabb) -> bool {
    (0..3).all(|k| a.min[k] < b.max[k] && b.min[k] < a.max[k])
}

/// Uniformly perturbs each group, rejecting overlapping layouts.
pub fn randomize_scene(
    base: &SceneSpec,
    ranges: &RandomizationRanges,
    seed: u64,
) -> Result<SceneSpec, SimError> {
    base.validate()?;
    for g in &ranges.groups {
        for id in &g.ids {
            if base.primitive(id).is_none() {
                return Err(SimError::UnknownId(id.clone()));
            }
        }
    }
    if ranges.is_zero() {
        let mut s = base.clone();
        s.seed = seed;
        return Ok(s);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    const ATTEMPTS: usize = 100;
    for _ in 0..ATTEMPTS {
        let mut scene = base.clone();
        scene.seed = seed;
        for g in &ranges.groups {
            let mut u = |h: f64| if h > 0.0 { rng.random_range(-h..=h) } else { 0.0 };
            let offset = Vec3::new(u(g.translation[0]), u(g.translation[1]), u(g.translation[2]));
            let yaw = u(g.yaw);
            let anchor = *base
                .primitive(&g.ids[0])
                .expect("checked above")
                .pose
                .translation();
            let rot = Pose::from_axis_angle(&Vec3::z(), yaw, Vec3::zeros());
            // rotate about the anchor, then shift
            let motion = Pose::from_translation(anchor + offset)
                .compose(&rot)
                .compose(&Pose::from_translation(-anchor));
            for id in &g.ids {
                let prim = scene
                    .objects
                    .iter_mut()
                    .chain(scene.occluders.iter_mut())
                    .find(|p| &p.id == id)
                    .expect("checked above");
                prim.pose = motion.compose(&prim.pose);
            }
            if g.include_target {
                scene.target = motion.compose(&scene.target);
            }
        }
        let movable: Vec<Primitive> = scene
            .all_primitives()
            .into_iter()
            .filter(|p| !scene.supports.contains(&p.id))
            .collect();
        let overlapping = (0..movable.len()).any(|i| {
            (i + 1..movable.len())
                .any(|j| aabb_overlap(&movable[i].world_aabb(), &movable[j].world_aabb()))
        });
        if !overlapping {
            return Ok(scene);
        }
    }
    Err(SimError::Overlap(ATTEMPTS))
}

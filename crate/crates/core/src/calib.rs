//! World frame from three tabletop spheres, camera-to-world propagation through
//! head tracking, and lifting camera clouds into the world frame.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{DepthFrame, FrameTag, Intrinsics, LabeledCloud, Mask};
use crate::geometry::{Pose, Vec3};

#[derive(Debug, Error, PartialEq)]
pub enum CalibError {
    #[error("sphere {index}: only {valid} masked pixels with valid depth (need {required})")]
    SphereMask {
        index: usize,
        valid: usize,
        required: usize,
    },
    #[error("sphere {index}: mask is {got_w}x{got_h}, depth is {want_w}x{want_h}")]
    MaskDimensions {
        index: usize,
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error("sphere centers are collinear (cross-product norm {0:e})")]
    Collinear(f64),
    #[error("cloud is already in the world frame")]
    AlreadyWorld,
}

/// Minimum masked pixels with valid depth per sphere.
pub const MIN_SPHERE_PIXELS: usize = 20;

/// Three-sphere calibration target plus the fixed glasses-to-camera mount.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRig {
    pub sphere_radius: f64,
    /// `b0`, `b1`, `b2` in the first camera frame.
    pub sphere_centers_cam0: [Vec3; 3],
    /// Maps glasses-frame coordinates into camera-frame coordinates.
    pub glass_to_cam: Pose,
}

impl CalibrationRig {
    pub fn is_non_collinear(&self) -> bool {
        let [b0, b1, b2] = self.sphere_centers_cam0;
        (b2 - b1).cross(&(b0 - b1)).norm() > 1e-6
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldAnchor {
    pub cam0_to_world: Pose,
}

/// Estimates each sphere center from its mask: back-projects the masked pixels
/// and fits a sphere of the known radius to them (Gauss-Newton), starting from
/// the centroid pushed away from the camera along the mean viewing ray.
pub fn sphere_centers_from_masks(
    depth: &DepthFrame,
    masks: [&Mask; 3],
    intr: &Intrinsics,
    radius: f64,
) -> Result<[Vec3; 3], CalibError> {
    let mut out = [Vec3::zeros(); 3];
    for (index, mask) in masks.iter().enumerate() {
        if mask.width != depth.width || mask.height != depth.height {
            return Err(CalibError::MaskDimensions {
                index,
                got_w: mask.width,
                got_h: mask.height,
                want_w: depth.width,
                want_h: depth.height,
            });
        }
        let mut pts = Vec::new();
        for (idx, _) in mask.data.iter().enumerate().filter(|(_, &m)| m) {
            let d = depth.data[idx];
            if !DepthFrame::is_valid(d) {
                continue;
            }
            let (u, v) = ((idx % depth.width) as f64, (idx / depth.width) as f64);
            pts.push(intr.ray(u, v) * d as f64);
        }
        if pts.len() < MIN_SPHERE_PIXELS {
            return Err(CalibError::SphereMask {
                index,
                valid: pts.len(),
                required: MIN_SPHERE_PIXELS,
            });
        }
        out[index] = fit_sphere_center(&pts, radius);
    }
    Ok(out)
}

fn fit_sphere_center(pts: &[Vec3], radius: f64) -> Vec3 {
    let n = pts.len() as f64;
    let centroid = pts.iter().fold(Vec3::zeros(), |a, p| a + p) / n;
    let ray = pts
        .iter()
        .fold(Vec3::zeros(), |a, p| a + p.normalize())
        .normalize();
    // a pixel-uniform sample of a visible cap sits ~2r/3 in front of the center
    let mut c = centroid + ray * (2.0 * radius / 3.0);
    for _ in 0..50 {
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        for p in pts {
            let d = c - p;
            let dn = d.norm();
            if dn < 1e-15 {
                continue;
            }
            let g = d / dn;
            let r = dn - radius;
            jtj += g * g.transpose();
            jtr += g * r;
        }
        let Some(step) = jtj.lu().solve(&(-jtr)) else {
            break;
        };
        c += step;
        if step.norm() < 1e-13 {
            break;
        }
    }
    c
}

/// Camera-to-world map with `b1` at the origin, `x` toward `b2`, `y` toward
/// `b0` (re-orthogonalized) and `z = x × y`.
pub fn world_frame_from_spheres(b0: &Vec3, b1: &Vec3, b2: &Vec3) -> Result<WorldAnchor, CalibError> {
    let cross = (b2 - b1).cross(&(b0 - b1)).norm();
    if !(cross > 1e-6) {
        return Err(CalibError::Collinear(cross));
    }
    let x = (b2 - b1).normalize();
    let y_raw = (b0 - b1).normalize();
    let z = x.cross(&y_raw).normalize();
    let y = z.cross(&x);
    let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    let rot = Pose::from_rotation_matrix(&r, Vec3::zeros());
    let t = -rot.rotate(b1);
    Ok(WorldAnchor {
        cam0_to_world: rot.with_translation(t),
    })
}

/// Camera-i to world: `W_0 ∘ M_i`, where `M_i` maps camera-i coordinates into
/// camera-0 coordinates via the tracked glasses poses.
pub fn propagate_cam_to_world(
    anchor: &WorldAnchor,
    head0: &Pose,
    head_i: &Pose,
    glass_to_cam: &Pose,
) -> Pose {
    if head0 == head_i {
        return anchor.cam0_to_world;
    }
    let cam_to_glass = glass_to_cam.inverse();
    let cam0 = head0.compose(&cam_to_glass);
    let cam_i = head_i.compose(&cam_to_glass);
    anchor.cam0_to_world.compose(&cam0.relative(&cam_i))
}

pub fn cloud_to_world(cam_to_world: &Pose, cloud: &LabeledCloud) -> Result<LabeledCloud, CalibError> {
    if cloud.frame == FrameTag::World {
        return Err(CalibError::AlreadyWorld);
    }
    Ok(cloud.transformed(cam_to_world, FrameTag::World))
}

//! Per-frame observation pipeline: depth back-projection, mask removal,
//! workspace cropping and voxel downsampling.

use std::collections::HashMap;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Pose, Vec3};

#[derive(Debug, Error)]
pub enum CloudError {
    #[error("dimension mismatch: expected {expected_w}x{expected_h}, got {got_w}x{got_h}")]
    Dimensions {
        expected_w: usize,
        expected_h: usize,
        got_w: usize,
        got_h: usize,
    },
    #[error("pixel provenance covers {provenance} points but cloud has {points}")]
    Provenance { provenance: usize, points: usize },
    #[error("cloud is tagged {found:?}, expected {expected:?}")]
    Frame { expected: FrameTag, found: FrameTag },
    #[error("voxel size must be positive, got {0}")]
    VoxelSize(f64),
    #[error("invalid intrinsics: {0}")]
    Intrinsics(String),
    #[error("malformed PLY: {0}")]
    Ply(String),
    #[error("buffer holds {got} bytes, expected {expected}")]
    BufferLength { expected: usize, got: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, CloudError> {
        let intr = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<(), CloudError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(CloudError::Intrinsics("focal lengths must be positive".into()));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(CloudError::Intrinsics("cx outside image".into()));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(CloudError::Intrinsics("cy outside image".into()));
        }
        Ok(())
    }

    /// Camera-frame ray through pixel `(u, v)` with unit z component.
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Row-major depth in meters; invalid pixels are non-finite.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthFrame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl DepthFrame {
    pub fn invalid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![f32::NAN; width * height],
        }
    }

    pub fn get(&self, u: usize, v: usize) -> f32 {
        self.data[v * self.width + u]
    }

    pub fn is_valid(d: f32) -> bool {
        d.is_finite() && d > 0.0
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|d| d.to_le_bytes()).collect()
    }

    pub fn from_bytes(width: usize, height: usize, buf: &[u8]) -> Result<Self, CloudError> {
        let expected = width * height * 4;
        if buf.len() != expected {
            return Err(CloudError::BufferLength {
                expected,
                got: buf.len(),
            });
        }
        let data = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        Ok(Self {
            width,
            height,
            data,
        })
    }

    fn check_dims(&self, intr: &Intrinsics) -> Result<(), CloudError> {
        check_dims(intr.width, intr.height, self.width, self.height)
    }
}

fn check_dims(ew: usize, eh: usize, w: usize, h: usize) -> Result<(), CloudError> {
    if ew != w || eh != h {
        return Err(CloudError::Dimensions {
            expected_w: ew,
            expected_h: eh,
            got_w: w,
            got_h: h,
        });
    }
    Ok(())
}

/// Binary mask. Stored on disk as 0/255 bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![true; width * height],
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&b| if b { 255 } else { 0 }).collect()
    }

    pub fn from_bytes(width: usize, height: usize, buf: &[u8]) -> Result<Self, CloudError> {
        if buf.len() != width * height {
            return Err(CloudError::BufferLength {
                expected: width * height,
                got: buf.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data: buf.iter().map(|&b| b != 0).collect(),
        })
    }
}

/// Row-major RGB image.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[u8; 3]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameTag {
    Camera,
    World,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCloud {
    pub points: Vec<Vec3>,
    pub colors: Option<Vec<[u8; 3]>>,
    pub frame: FrameTag,
    /// Source pixel (row-major index) of each point, when the cloud came from a depth image.
    pub pixel_index: Option<Vec<u32>>,
}

impl LabeledCloud {
    pub fn new(points: Vec<Vec3>, frame: FrameTag) -> Self {
        Self {
            points,
            colors: None,
            frame,
            pixel_index: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Keeps the points for which `keep` is true, carrying colors and provenance along.
    pub fn filter_by<F: FnMut(usize) -> bool>(&self, mut keep: F) -> LabeledCloud {
        let idx: Vec<usize> = (0..self.points.len()).filter(|&i| keep(i)).collect();
        LabeledCloud {
            points: idx.iter().map(|&i| self.points[i]).collect(),
            colors: self
                .colors
                .as_ref()
                .map(|c| idx.iter().map(|&i| c[i]).collect()),
            frame: self.frame,
            pixel_index: self
                .pixel_index
                .as_ref()
                .map(|p| idx.iter().map(|&i| p[i]).collect()),
        }
    }

    /// Maps every point through `pose` and retags. No frame checks.
    pub fn transformed(&self, pose: &Pose, frame: FrameTag) -> LabeledCloud {
        LabeledCloud {
            points: self.points.iter().map(|p| pose.apply(p)).collect(),
            colors: self.colors.clone(),
            frame,
            pixel_index: self.pixel_index.clone(),
        }
    }
}

/// Pixel `(u, v)` with depth `d` becomes `((u-cx)d/fx, (v-cy)d/fy, d)`.
pub fn backproject(
    depth: &DepthFrame,
    intr: &Intrinsics,
    color: Option<&ColorImage>,
) -> Result<LabeledCloud, CloudError> {
    depth.check_dims(intr)?;
    if let Some(c) = color {
        check_dims(intr.width, intr.height, c.width, c.height)?;
    }
    let mut points = Vec::new();
    let mut colors = color.map(|_| Vec::new());
    let mut pixels = Vec::new();
    for v in 0..depth.height {
        for u in 0..depth.width {
            let idx = v * depth.width + u;
            let d = depth.data[idx];
            if !DepthFrame::is_valid(d) {
                continue;
            }
            let d = d as f64;
            points.push(Vec3::new(
                (u as f64 - intr.cx) * d / intr.fx,
                (v as f64 - intr.cy) * d / intr.fy,
                d,
            ));
            if let (Some(out), Some(img)) = (colors.as_mut(), color) {
                out.push(img.data[idx]);
            }
            pixels.push(idx as u32);
        }
    }
    Ok(LabeledCloud {
        points,
        colors,
        frame: FrameTag::Camera,
        pixel_index: Some(pixels),
    })
}

/// Drops exactly the points whose source pixel is set in `mask`.
pub fn remove_masked(
    cloud: &LabeledCloud,
    mask: &Mask,
    pixel_index: &[u32],
) -> Result<LabeledCloud, CloudError> {
    if pixel_index.len() != cloud.len() {
        return Err(CloudError::Provenance {
            provenance: pixel_index.len(),
            points: cloud.len(),
        });
    }
    let n = mask.data.len();
    if let Some(&bad) = pixel_index.iter().find(|&&p| p as usize >= n) {
        return Err(CloudError::Provenance {
            provenance: bad as usize,
            points: n,
        });
    }
    Ok(cloud.filter_by(|i| !mask.data[pixel_index[i] as usize]))
}

/// Axis-aligned box, inclusive bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn infinite() -> Self {
        Self {
            min: [f64::NEG_INFINITY; 3],
            max: [f64::INFINITY; 3],
        }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

impl Default for Aabb {
    /// Default tabletop workspace in the world frame.
    fn default() -> Self {
        Self {
            min: [-0.2, -0.2, -0.05],
            max: [1.0, 1.0, 0.8],
        }
    }
}

pub fn crop_workspace(cloud: &LabeledCloud, bounds: &Aabb) -> Result<LabeledCloud, CloudError> {
    if cloud.frame != FrameTag::World {
        return Err(CloudError::Frame {
            expected: FrameTag::World,
            found: cloud.frame,
        });
    }
    Ok(cloud.filter_by(|i| bounds.contains(&cloud.points[i])))
}

/// One centroid (and mean color) per occupied voxel, ordered by voxel key.
/// Exact duplicate points are counted once and members are summed in sorted
/// order, so the result is bit-identical under permutation or duplication of
/// the input.
pub fn voxel_downsample(cloud: &LabeledCloud, voxel: f64) -> Result<LabeledCloud, CloudError> {
    if !(voxel > 0.0) || !voxel.is_finite() {
        return Err(CloudError::VoxelSize(voxel));
    }
    let mut cells: HashMap<[i64; 3], Vec<(Vec3, [u8; 3])>> = HashMap::new();
    for (i, p) in cloud.points.iter().enumerate() {
        let c = cloud.colors.as_ref().map_or([0; 3], |c| c[i]);
        cells.entry(voxel_key(p, voxel)).or_default().push((*p, c));
    }
    let mut keys: Vec<[i64; 3]> = cells.keys().copied().collect();
    keys.sort_unstable();
    let mut points = Vec::with_capacity(keys.len());
    let mut colors = cloud.colors.as_ref().map(|_| Vec::with_capacity(keys.len()));
    for key in keys {
        let members = cells.get_mut(&key).expect("key from map");
        members.sort_unstable_by(|(a, ca), (b, cb)| {
            a.x.total_cmp(&b.x)
                .then(a.y.total_cmp(&b.y))
                .then(a.z.total_cmp(&b.z))
                .then(ca.cmp(cb))
        });
        members.dedup_by(|(a, ca), (b, cb)| {
            a.x.to_bits() == b.x.to_bits()
                && a.y.to_bits() == b.y.to_bits()
                && a.z.to_bits() == b.z.to_bits()
                && ca == cb
        });
        let n = members.len() as f64;
        points.push(members.iter().fold(Vec3::zeros(), |acc, (p, _)| acc + p) / n);
        if let Some(out) = colors.as_mut() {
            let mut sum = [0u64; 3];
            for (_, c) in members.iter() {
                for k in 0..3 {
                    sum[k] += c[k] as u64;
                }
            }
            let mean = |k: usize| ((sum[k] as f64 / n).round()) as u8;
            out.push([mean(0), mean(1), mean(2)]);
        }
    }
    Ok(LabeledCloud {
        points,
        colors,
        frame: cloud.frame,
        pixel_index: None,
    })
}

pub fn voxel_key(p: &Vec3, voxel: f64) -> [i64; 3] {
    [
        (p.x / voxel).floor() as i64,
        (p.y / voxel).floor() as i64,
        (p.z / voxel).floor() as i64,
    ]
}

/// Binary little-endian PLY: double x,y,z and uchar red,green,blue.
pub fn write_ply<W: Write>(mut w: W, cloud: &LabeledCloud) -> Result<(), CloudError> {
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property double x\nproperty double y\nproperty double z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        cloud.len()
    )?;
    let mut buf = Vec::with_capacity(cloud.len() * 27);
    for (i, p) in cloud.points.iter().enumerate() {
        for k in 0..3 {
            buf.extend_from_slice(&p[k].to_le_bytes());
        }
        let c = cloud
            .colors
            .as_ref()
            .map(|c| c[i])
            .unwrap_or([255, 255, 255]);
        buf.extend_from_slice(&c);
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads the subset of PLY that [`write_ply`] emits, with `float` or `double`
/// coordinates. The frame tag is not stored in PLY and must be given.
pub fn read_ply<R: BufRead>(mut r: R, frame: FrameTag) -> Result<LabeledCloud, CloudError> {
    let mut line = String::new();
    let mut header = Vec::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(CloudError::Ply("unexpected end of header".into()));
        }
        let l = line.trim_end().to_string();
        if l == "end_header" {
            break;
        }
        header.push(l);
    }
    if header.first().map(String::as_str) != Some("ply") {
        return Err(CloudError::Ply("missing magic".into()));
    }
    if !header.iter().any(|l| l == "format binary_little_endian 1.0") {
        return Err(CloudError::Ply("only binary_little_endian is supported".into()));
    }
    let count = header
        .iter()
        .find_map(|l| l.strip_prefix("element vertex "))
        .ok_or_else(|| CloudError::Ply("missing vertex element".into()))?
        .trim()
        .parse::<usize>()
        .map_err(|e| CloudError::Ply(e.to_string()))?;
    let props: Vec<&str> = header
        .iter()
        .filter_map(|l| l.strip_prefix("property "))
        .collect();
    let width = match props.first().and_then(|p| p.split_whitespace().next()) {
        Some("float") => 4,
        Some("double") => 8,
        _ => return Err(CloudError::Ply(format!("unsupported properties {props:?}"))),
    };
    let ty = if width == 4 { "float" } else { "double" };
    let expected = [
        format!("{ty} x"),
        format!("{ty} y"),
        format!("{ty} z"),
        "uchar red".into(),
        "uchar green".into(),
        "uchar blue".into(),
    ];
    if props != expected {
        return Err(CloudError::Ply(format!("unsupported properties {props:?}")));
    }
    let stride = 3 * width + 3;
    let mut body = vec![0u8; count * stride];
    r.read_exact(&mut body)?;
    let mut points = Vec::with_capacity(count);
    let mut colors = Vec::with_capacity(count);
    for rec in body.chunks_exact(stride) {
        let f = |o: usize| match width {
            4 => f32::from_le_bytes(rec[o..o + 4].try_into().expect("4 bytes")) as f64,
            _ => f64::from_le_bytes(rec[o..o + 8].try_into().expect("8 bytes")),
        };
        points.push(Vec3::new(f(0), f(width), f(2 * width)));
        let c = 3 * width;
        colors.push([rec[c], rec[c + 1], rec[c + 2]]);
    }
    Ok(LabeledCloud {
        points,
        colors: Some(colors),
        frame,
        pixel_index: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intr() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 32.0, 24.0, 64, 48).unwrap()
    }

    #[test]
    fn principal_ray_backprojects_on_axis() {
        let i = intr();
        let mut d = DepthFrame::invalid(64, 48);
        d.data[24 * 64 + 32] = 2.0;
        let c = backproject(&d, &i, None).unwrap();
        assert_eq!(c.points, vec![Vec3::new(0.0, 0.0, 2.0)]);
        assert_eq!(c.frame, FrameTag::Camera);
        assert_eq!(c.pixel_index, Some(vec![24 * 64 + 32]));
    }

    #[test]
    fn invalid_depth_gives_empty_cloud() {
        let mut d = DepthFrame::invalid(64, 48);
        d.data[3] = 0.0;
        d.data[4] = f32::INFINITY;
        assert!(backproject(&d, &intr(), None).unwrap().is_empty());
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let d = DepthFrame::invalid(63, 48);
        assert!(matches!(
            backproject(&d, &intr(), None),
            Err(CloudError::Dimensions { .. })
        ));
    }

    #[test]
    fn intrinsics_validation() {
        assert!(Intrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 3.5, 0.0, 4, 4).is_ok());
    }

    fn full_frame(depth: f32) -> (DepthFrame, LabeledCloud) {
        let d = DepthFrame {
            width: 64,
            height: 48,
            data: vec![depth; 64 * 48],
        };
        let c = backproject(&d, &intr(), None).unwrap();
        (d, c)
    }

    #[test]
    fn remove_masked_empty_and_full() {
        let (_, c) = full_frame(1.0);
        let prov = c.pixel_index.clone().unwrap();
        let kept = remove_masked(&c, &Mask::empty(64, 48), &prov).unwrap();
        assert_eq!(kept.points, c.points);
        let none = remove_masked(&c, &Mask::full(64, 48), &prov).unwrap();
        assert!(none.is_empty());
        assert!(matches!(
            remove_masked(&c, &Mask::empty(64, 48), &prov[1..]),
            Err(CloudError::Provenance { .. })
        ));
    }

    #[test]
    fn masking_commutes_with_backprojection() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut d = DepthFrame::invalid(64, 48);
        for v in d.data.iter_mut() {
            if rng.random_bool(0.8) {
                *v = rng.random_range(0.5..3.0);
            }
        }
        let mut m = Mask::empty(64, 48);
        for b in m.data.iter_mut() {
            *b = rng.random_bool(0.3);
        }
        let c = backproject(&d, &intr(), None).unwrap();
        let a = remove_masked(&c, &m, c.pixel_index.as_ref().unwrap()).unwrap();
        let mut dm = d.clone();
        for (v, &b) in dm.data.iter_mut().zip(&m.data) {
            if b {
                *v = f32::NAN;
            }
        }
        let b = backproject(&dm, &intr(), None).unwrap();
        assert_eq!(a.points, b.points);
        assert_eq!(a.pixel_index, b.pixel_index);
    }

    #[test]
    fn crop_requires_world_frame() {
        let (_, c) = full_frame(1.0);
        assert!(matches!(
            crop_workspace(&c, &Aabb::infinite()),
            Err(CloudError::Frame { .. })
        ));
        let w = c.transformed(&Pose::identity(), FrameTag::World);
        assert_eq!(crop_workspace(&w, &Aabb::infinite()).unwrap().points, w.points);
        let far = Aabb {
            min: [10.0; 3],
            max: [11.0; 3],
        };
        assert!(crop_workspace(&w, &far).unwrap().is_empty());
    }

    #[test]
    fn voxel_small_cases() {
        let c = LabeledCloud::new(
            vec![Vec3::new(0.001, 0.001, 0.001), Vec3::new(0.003, 0.003, 0.003)],
            FrameTag::World,
        );
        let d = voxel_downsample(&c, 0.01).unwrap();
        assert_eq!(d.len(), 1);
        assert!((d.points[0] - Vec3::new(0.002, 0.002, 0.002)).norm() < 1e-12);

        let c = LabeledCloud::new(
            vec![Vec3::new(0.005, 0.0, 0.0), Vec3::new(0.025, 0.0, 0.0)],
            FrameTag::World,
        );
        assert_eq!(voxel_downsample(&c, 0.01).unwrap().len(), 2);
        assert!(matches!(
            voxel_downsample(&c, 0.0),
            Err(CloudError::VoxelSize(_))
        ));
        assert!(voxel_downsample(&c, -1.0).is_err());
    }

    #[test]
    fn voxel_ignores_order_and_duplicates_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let pts: Vec<Vec3> = (0..2000)
            .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()) * 0.1)
            .collect();
        let cols: Vec<[u8; 3]> = (0..2000).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let mut cloud = LabeledCloud::new(pts.clone(), FrameTag::World);
        cloud.colors = Some(cols.clone());
        let base = voxel_downsample(&cloud, 0.02).unwrap();

        let mut order: Vec<usize> = (0..2000).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut shuffled = LabeledCloud::new(order.iter().map(|&i| pts[i]).collect(), FrameTag::World);
        shuffled.colors = Some(order.iter().map(|&i| cols[i]).collect());
        let mut doubled = shuffled.clone();
        doubled.points.extend(pts.iter().take(500));
        doubled.colors.as_mut().unwrap().extend(cols.iter().take(500));
        for other in [shuffled, doubled] {
            let d = voxel_downsample(&other, 0.02).unwrap();
            assert_eq!(d.colors, base.colors);
            for (a, b) in d.points.iter().zip(&base.points) {
                assert_eq!(a.map(f64::to_bits), b.map(f64::to_bits));
            }
        }
    }

    #[test]
    fn voxel_matches_brute_force_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let voxel = 0.01;
        let pts: Vec<Vec3> = (0..10_000)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-0.1..0.1),
                    rng.random_range(-0.1..0.1),
                    rng.random_range(0.0..0.05),
                )
            })
            .collect();
        let cloud = LabeledCloud::new(pts.clone(), FrameTag::World);
        let out = voxel_downsample(&cloud, voxel).unwrap();

        // brute force: scan the grid cell by cell
        let mut expected = Vec::new();
        for ix in -10..10i64 {
            for iy in -10..10i64 {
                for iz in 0..5i64 {
                    let lo = Vec3::new(ix as f64, iy as f64, iz as f64) * voxel;
                    let members: Vec<&Vec3> = pts
                        .iter()
                        .filter(|p| {
                            (0..3).all(|k| {
                                (p[k] / voxel).floor() as i64 == [ix, iy, iz][k]
                            })
                        })
                        .collect();
                    if !members.is_empty() {
                        let c = members.iter().fold(Vec3::zeros(), |a, p| a + *p)
                            / members.len() as f64;
                        expected.push((c, lo));
                    }
                }
            }
        }
        assert_eq!(out.len(), expected.len());
        let half_diag = voxel * 3f64.sqrt() / 2.0;
        for p in &out.points {
            let (nearest, _) = expected
                .iter()
                .map(|(c, _)| ((c - p).norm(), c))
                .fold((f64::INFINITY, None), |acc, (d, c)| {
                    if d < acc.0 {
                        (d, Some(c))
                    } else {
                        acc
                    }
                });
            assert!(nearest < 1e-12);
            let min_in = pts
                .iter()
                .map(|q| (q - p).norm())
                .fold(f64::INFINITY, f64::min);
            assert!(min_in <= half_diag);
        }
        // idempotent
        let again = voxel_downsample(&out, voxel).unwrap();
        assert_eq!(again.points, out.points);
    }

    #[test]
    fn ply_round_trip() {
        let c = LabeledCloud {
            points: vec![Vec3::new(0.5, -0.25, 1.0), Vec3::new(1.0, 2.0, 3.0)],
            colors: Some(vec![[1, 2, 3], [250, 0, 7]]),
            frame: FrameTag::World,
            pixel_index: None,
        };
        let mut buf = Vec::new();
        write_ply(&mut buf, &c).unwrap();
        let back = read_ply(&buf[..], FrameTag::World).unwrap();
        assert_eq!(back, c);
        assert!(read_ply(&b"nope\nend_header\n"[..], FrameTag::World).is_err());

        let mut single = b"ply\nformat binary_little_endian 1.0\nelement vertex 1\n\
            property float x\nproperty float y\nproperty float z\n\
            property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n"
            .to_vec();
        for v in [0.5f32, -0.25, 1.0] {
            single.extend_from_slice(&v.to_le_bytes());
        }
        single.extend_from_slice(&[1, 2, 3]);
        let back = read_ply(&single[..], FrameTag::World).unwrap();
        assert_eq!(back.points, vec![c.points[0]]);
        assert_eq!(back.colors, Some(vec![[1, 2, 3]]));
    }

    #[test]
    fn depth_and_mask_bytes() {
        let d = DepthFrame {
            width: 2,
            height: 1,
            data: vec![1.5, f32::NAN],
        };
        let bytes = d.to_bytes();
        assert_eq!(&bytes[0..4], &1.5f32.to_le_bytes());
        let back = DepthFrame::from_bytes(2, 1, &bytes).unwrap();
        assert_eq!(back.data[0], 1.5);
        assert!(back.data[1].is_nan());
        assert!(DepthFrame::from_bytes(2, 1, &bytes[..7]).is_err());
        let m = Mask {
            width: 2,
            height: 1,
            data: vec![true, false],
        };
        assert_eq!(m.to_bytes(), vec![255, 0]);
        assert_eq!(Mask::from_bytes(2, 1, &m.to_bytes()).unwrap(), m);
    }
}

//! Procedural scenes: capsule bodies, simulated LiDAR, a simple renderer,
//! occluders, and the binary record format.
//!
//! World frame: z up, ground plane `z = 0`. Camera and LiDAR sit above the
//! origin; people stand on the ground 2–40 m away.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::RgbImage;
use crate::geometry::{
    mat_mul, mat_vec, rig_from_raw_fields, rig_raw_fields, rot_x, rot_y, rot_z, transpose, Box2d, CameraExtrinsics, CameraIntrinsics,
    CameraRig, Mat3, OrientedBox, RIG_FIELD_COUNT,
};
use crate::pointops::PointCloud;

/// Output keypoints per sample.
pub const N_KEYPOINTS: usize = 14;

/// One person instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Also seeds the point shuffle during preprocessing.
    pub id: u64,
    pub image: RgbImage<f32>,
    pub cloud: PointCloud<f32>,
    pub cam: CameraRig<f64>,
    pub box2d: Box2d,
    pub box3d: OrientedBox,
    /// World-frame joints (m).
    pub labels3d: Option<Vec<[f64; 3]>>,
    /// Frame pixels.
    pub labels2d: Option<Vec<[f64; 2]>>,
    /// Per-joint visibility shared by both label kinds.
    pub visibility: Vec<bool>,
}

impl Sample {
    pub fn n_joints(&self) -> usize {
        self.visibility.len()
    }

    /// Horizontal distance between the camera and the box centre (m).
    pub fn distance(&self) -> f64 {
        let c = self.cam.center();
        ((self.box3d.center[0] - c[0]).powi(2) + (self.box3d.center[1] - c[1]).powi(2)).sqrt()
    }

    pub fn visible_count(&self) -> usize {
        self.visibility.iter().filter(|&&v| v).count()
    }
}

// ---------------------------------------------------------------- skeleton

/// Kinematic tree with per-bone rest directions (body frame: x forward,
/// y left, z up), length ranges and XYZ Euler limits of each bone rotation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkeletonSpec {
    pub names: Vec<String>,
    /// `None` for the root.
    pub parents: Vec<Option<usize>>,
    pub rest_dirs: Vec<[f64; 3]>,
    pub bone_lengths: Vec<f64>,
    pub length_ranges: Vec<[f64; 2]>,
    /// `[axis][min, max]` per joint.
    pub angle_limits: Vec<[[f64; 2]; 3]>,
    /// Internal joint index of each output keypoint.
    pub keypoints: Vec<usize>,
}

impl Default for SkeletonSpec {
    fn default() -> Self {
        let z = [0.0, 0.0];
        #[rustfmt::skip]
        let joints: [(&str, Option<usize>, [f64; 3], f64, [f64; 2], [[f64; 2]; 3]); 16] = [
            ("pelvis", None, [0.0, 0.0, 0.0], 0.0, [0.0, 0.0], [z, z, z]),
            ("thorax", Some(0), [0.0, 0.0, 1.0], 0.50, [0.44, 0.56], [[-0.2, 0.2], [-0.1, 0.5], [-0.5, 0.5]]),
            ("head_center", Some(1), [0.0, 0.0, 1.0], 0.28, [0.24, 0.31], [[-0.3, 0.3], [-0.3, 0.5], [-0.8, 0.8]]),
            ("nose", Some(2), [1.0, 0.0, 0.0], 0.10, [0.09, 0.11], [z, z, z]),
            ("left_shoulder", Some(1), [0.0, 1.0, 0.0], 0.18, [0.15, 0.21], [z, z, z]),
            ("right_shoulder", Some(1), [0.0, -1.0, 0.0], 0.18, [0.15, 0.21], [z, z, z]),
            ("left_elbow", Some(4), [0.0, 0.0, -1.0], 0.29, [0.25, 0.33], [[-0.2, 1.4], [-1.6, 1.0], [-0.5, 0.5]]),
            ("right_elbow", Some(5), [0.0, 0.0, -1.0], 0.29, [0.25, 0.33], [[-1.4, 0.2], [-1.6, 1.0], [-0.5, 0.5]]),
            ("left_wrist", Some(6), [0.0, 0.0, -1.0], 0.26, [0.22, 0.29], [z, [-2.2, 0.0], z]),
            ("right_wrist", Some(7), [0.0, 0.0, -1.0], 0.26, [0.22, 0.29], [z, [-2.2, 0.0], z]),
            ("left_hip", Some(0), [0.0, 1.0, 0.0], 0.10, [0.08, 0.12], [z, z, z]),
            ("right_hip", Some(0), [0.0, -1.0, 0.0], 0.10, [0.08, 0.12], [z, z, z]),
            ("left_knee", Some(10), [0.0, 0.0, -1.0], 0.44, [0.40, 0.48], [[-0.1, 0.6], [-1.2, 0.3], [-0.3, 0.3]]),
            ("right_knee", Some(11), [0.0, 0.0, -1.0], 0.44, [0.40, 0.48], [[-0.6, 0.1], [-1.2, 0.3], [-0.3, 0.3]]),
            ("left_ankle", Some(12), [0.0, 0.0, -1.0], 0.42, [0.38, 0.46], [z, [0.0, 1.8], z]),
            ("right_ankle", Some(13), [0.0, 0.0, -1.0], 0.42, [0.38, 0.46], [z, [0.0, 1.8], z]),
        ];
        Self {
            names: joints.iter().map(|j| j.0.to_string()).collect(),
            parents: joints.iter().map(|j| j.1).collect(),
            rest_dirs: joints.iter().map(|j| j.2).collect(),
            bone_lengths: joints.iter().map(|j| j.3).collect(),
            length_ranges: joints.iter().map(|j| j.4).collect(),
            angle_limits: joints.iter().map(|j| j.5).collect(),
            keypoints: vec![3, 2, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15],
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid skeleton: {0}")]
pub struct SkeletonError(pub String);

impl SkeletonSpec {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Parents precede children, exactly one root at index 0, positive bones.
    pub fn validate(&self) -> Result<(), SkeletonError> {
        let n = self.names.len();
        let lens = [self.parents.len(), self.rest_dirs.len(), self.bone_lengths.len(), self.length_ranges.len(), self.angle_limits.len()];
        if n == 0 || lens.iter().any(|&l| l != n) {
            return Err(SkeletonError("field lengths disagree".into()));
        }
        if self.parents[0].is_some() {
            return Err(SkeletonError("joint 0 must be the root".into()));
        }
        for j in 1..n {
            match self.parents[j] {
                Some(p) if p < j => {}
                _ => return Err(SkeletonError(format!("joint {j} needs a parent with a smaller index"))),
            }
            if !(self.bone_lengths[j] > 0.0) {
                return Err(SkeletonError(format!("bone {j} has non-positive length")));
            }
        }
        if self.keypoints.iter().any(|&k| k >= n) {
            return Err(SkeletonError("keypoint index out of range".into()));
        }
        Ok(())
    }
}

/// Local bone rotation `Rz(c) · Ry(b) · Rx(a)`.
pub fn euler_xyz(a: [f64; 3]) -> Mat3<f64> {
    mat_mul(&rot_z(a[2]), &mat_mul(&rot_y(a[1]), &rot_x(a[0])))
}

/// Sampled pose: bone lengths, local angles and the body-frame joints.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose {
    pub lengths: Vec<f64>,
    pub angles: Vec<[f64; 3]>,
    /// All skeleton joints, pelvis at the origin, body frame.
    pub joints: Vec<[f64; 3]>,
}

/// Forward kinematics in the body frame with the pelvis at the origin.
pub fn forward_kinematics(spec: &SkeletonSpec, lengths: &[f64], angles: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let n = spec.len();
    let mut rot = vec![euler_xyz([0.0; 3]); n];
    let mut pos = vec![[0.0; 3]; n];
    for j in 1..n {
        let p = spec.parents[j].expect("validated tree");
        rot[j] = mat_mul(&rot[p], &euler_xyz(angles[j]));
        let d = spec.rest_dirs[j].map(|x| x * lengths[j]);
        let off = mat_vec(&rot[j], &d);
        pos[j] = [pos[p][0] + off[0], pos[p][1] + off[1], pos[p][2] + off[2]];
    }
    pos
}

/// Seeded bone lengths and angles, uniform within the ranges in `spec`.
pub fn sample_pose(spec: &SkeletonSpec, rng: &mut impl Rng) -> Pose {
    let mut uni = |r: [f64; 2]| if r[1] > r[0] { rng.random_range(r[0]..=r[1]) } else { r[0] };
    let lengths: Vec<f64> = (0..spec.len()).map(|j| if j == 0 { 0.0 } else { uni(spec.length_ranges[j]) }).collect();
    let angles: Vec<[f64; 3]> = spec.angle_limits.iter().map(|l| [uni(l[0]), uni(l[1]), uni(l[2])]).collect();
    let joints = forward_kinematics(spec, &lengths, &angles);
    Pose { lengths, angles, joints }
}

// ---------------------------------------------------------------- bodies

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Capsule {
    pub a: [f64; 3],
    pub b: [f64; 3],
    pub radius: f64,
    /// 0 skin, 1 upper clothing, 2 lower clothing.
    pub material: u8,
}

/// `(joint a, joint b, radius, material)` for the default skeleton. The head
/// sphere radius is set from the nose bone at build time.
const BODY_PARTS: [(usize, usize, f64, u8); 15] = [
    (0, 1, 0.13, 1),
    (1, 2, 0.05, 0),
    (2, 2, 0.0, 0),
    (1, 4, 0.06, 1),
    (1, 5, 0.06, 1),
    (4, 6, 0.05, 1),
    (5, 7, 0.05, 1),
    (6, 8, 0.04, 0),
    (7, 9, 0.04, 0),
    (0, 10, 0.09, 2),
    (0, 11, 0.09, 2),
    (10, 12, 0.07, 2),
    (11, 13, 0.07, 2),
    (12, 14, 0.055, 2),
    (13, 15, 0.055, 2),
];

fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn scale(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

/// Capsules of the default body for world-frame joints; the head sphere
/// passes through the nose.
pub fn body_capsules(joints: &[[f64; 3]]) -> Vec<Capsule> {
    let head_r = norm(sub(joints[3], joints[2]));
    BODY_PARTS
        .iter()
        .map(|&(a, b, r, m)| Capsule { a: joints[a], b: joints[b], radius: if a == b { head_r } else { r }, material: m })
        .collect()
}

/// Distance from `p` to segment `ab`.
pub fn point_segment_distance(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = sub(b, a);
    let l2 = dot(ab, ab);
    let t = if l2 < 1e-18 { 0.0 } else { (dot(sub(p, a), ab) / l2).clamp(0.0, 1.0) };
    norm(sub(p, add(a, scale(ab, t))))
}

fn ray_sphere(o: [f64; 3], d: [f64; 3], c: [f64; 3], r: f64) -> Option<f64> {
    let oc = sub(o, c);
    let b = dot(d, oc);
    let h = b * b - (dot(oc, oc) - r * r);
    if h < 0.0 {
        return None;
    }
    let t = -b - h.sqrt();
    (t > 0.0).then_some(t)
}

/// Nearest positive hit of the unit-direction ray `o + t d` with a capsule.
pub fn ray_capsule(o: [f64; 3], d: [f64; 3], c: &Capsule) -> Option<f64> {
    let ba = sub(c.b, c.a);
    let baba = dot(ba, ba);
    if baba < 1e-18 {
        return ray_sphere(o, d, c.a, c.radius);
    }
    let oa = sub(o, c.a);
    let bard = dot(ba, d);
    let baoa = dot(ba, oa);
    let rdoa = dot(d, oa);
    let oaoa = dot(oa, oa);
    let qa = baba - bard * bard;
    let qb = baba * rdoa - baoa * bard;
    let qc = baba * oaoa - baoa * baoa - c.radius * c.radius * baba;
    if qa > 1e-12 * baba {
        let h = qb * qb - qa * qc;
        if h < 0.0 {
            return None;
        }
        let t = (-qb - h.sqrt()) / qa;
        let y = baoa + t * bard;
        if y > 0.0 && y < baba {
            return (t > 0.0).then_some(t);
        }
    }
    let ta = ray_sphere(o, d, c.a, c.radius);
    let tb = ray_sphere(o, d, c.b, c.radius);
    match (ta, tb) {
        (Some(x), Some(y)) => Some(x.min(y)),
        (x, y) => x.or(y),
    }
}

/// Vertical rectangle: points `base + s * lateral + z * up` with
/// `s ∈ [s0, s1]`, world `z ∈ [z0, z1]`; `lateral` is a horizontal unit
/// vector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Occluder {
    pub base: [f64; 3],
    pub lateral: [f64; 3],
    pub s_range: [f64; 2],
    pub z_range: [f64; 2],
}

impl Occluder {
    fn normal(&self) -> [f64; 3] {
        [-self.lateral[1], self.lateral[0], 0.0]
    }

    /// Ray parameter of the hit, if the ray crosses the rectangle.
    pub fn hit(&self, o: [f64; 3], d: [f64; 3]) -> Option<f64> {
        let n = self.normal();
        let den = dot(n, d);
        if den.abs() < 1e-12 {
            return None;
        }
        let t = dot(n, sub(self.base, o)) / den;
        if t <= 0.0 {
            return None;
        }
        let p = add(o, scale(d, t));
        let s = dot(sub(p, self.base), self.lateral);
        (s >= self.s_range[0] && s <= self.s_range[1] && p[2] >= self.z_range[0] && p[2] <= self.z_range[1]).then_some(t)
    }

    /// Whether the open segment `a → b` crosses the rectangle.
    pub fn blocks(&self, a: [f64; 3], b: [f64; 3]) -> bool {
        let ab = sub(b, a);
        let len = norm(ab);
        len > 0.0 && self.hit(a, scale(ab, 1.0 / len)).is_some_and(|t| t < len)
    }

    pub fn corners(&self) -> [[f64; 3]; 4] {
        let at = |s: f64, z: f64| {
            let p = add(self.base, scale(self.lateral, s));
            [p[0], p[1], z]
        };
        [at(self.s_range[0], self.z_range[0]), at(self.s_range[1], self.z_range[0]), at(self.s_range[1], self.z_range[1]), at(self.s_range[0], self.z_range[1])]
    }
}

// ---------------------------------------------------------------- lidar

/// Azimuth/elevation lattice (radians) of a spinning LiDAR; beams sit on
/// integer multiples of the steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayGrid {
    pub azimuth: [f64; 2],
    pub elevation: [f64; 2],
    pub azimuth_step: f64,
    pub elevation_step: f64,
}

impl RayGrid {
    pub fn directions(&self) -> Vec<[f64; 3]> {
        let ks = |r: [f64; 2], s: f64| ((r[0] / s).ceil() as i64)..=((r[1] / s).floor() as i64);
        let mut out = Vec::new();
        for ke in ks(self.elevation, self.elevation_step) {
            let el = ke as f64 * self.elevation_step;
            for ka in ks(self.azimuth, self.azimuth_step) {
                let az = ka as f64 * self.azimuth_step;
                out.push([el.cos() * az.cos(), el.cos() * az.sin(), el.sin()]);
            }
        }
        out
    }

    /// Lattice over the angular extent of `capsules` seen from `origin`.
    pub fn covering(capsules: &[Capsule], origin: [f64; 3], azimuth_step: f64, elevation_step: f64) -> Self {
        let mut az = [f64::INFINITY, f64::NEG_INFINITY];
        let mut el = [f64::INFINITY, f64::NEG_INFINITY];
        for c in capsules {
            for p in [c.a, c.b] {
                let d = sub(p, origin);
                let h = (d[0] * d[0] + d[1] * d[1]).sqrt();
                let pad = (c.radius / norm(d).max(1e-6)).min(1.0).asin();
                let a = d[1].atan2(d[0]);
                let e = d[2].atan2(h);
                az = [az[0].min(a - pad), az[1].max(a + pad)];
                el = [el[0].min(e - pad), el[1].max(e + pad)];
            }
        }
        Self { azimuth: az, elevation: el, azimuth_step, elevation_step }
    }
}

/// Nearest capsule hit per ray plus Gaussian range noise; rays that miss or
/// hit an occluder first are dropped.
pub fn simulate_lidar(
    capsules: &[Capsule],
    occluders: &[Occluder],
    origin: [f64; 3],
    grid: &RayGrid,
    range_sigma: f64,
    rng: &mut impl Rng,
) -> PointCloud<f32> {
    let noise = Normal::new(0.0, range_sigma.max(0.0)).expect("finite sigma");
    let mut points = Vec::new();
    for d in grid.directions() {
        let Some(t) = capsules.iter().filter_map(|c| ray_capsule(origin, d, c)).min_by(f64::total_cmp) else { continue };
        if occluders.iter().any(|o| o.hit(origin, d).is_some_and(|to| to < t)) {
            continue;
        }
        let r = t + if range_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
        let p = add(origin, scale(d, r));
        points.push([p[0] as f32, p[1] as f32, p[2] as f32]);
    }
    PointCloud::new(points)
}

// ---------------------------------------------------------------- render

/// Per-sample appearance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Palette {
    pub skin: [f64; 3],
    pub upper: [f64; 3],
    pub lower: [f64; 3],
    pub occluder: [f64; 3],
}

impl Default for Palette {
    fn default() -> Self {
        Self { skin: [0.85, 0.65, 0.5], upper: [0.2, 0.35, 0.8], lower: [0.25, 0.25, 0.3], occluder: [0.55, 0.55, 0.5] }
    }
}

const AMBIENT: f64 = 0.35;

/// Sky above the horizon, a checkered ground plane below; deterministic in
/// the camera alone.
pub fn render_background(cam: &CameraRig<f64>) -> RgbImage<f32> {
    let (w, h) = (cam.width() as usize, cam.height() as usize);
    let i = cam.intrinsics();
    let rt = transpose(&cam.extrinsics().rotation);
    let c = cam.center();
    let mut img = RgbImage::new(h, w);
    for v in 0..h {
        for u in 0..w {
            let dc = [(u as f64 - i.cx) / i.fx, (v as f64 - i.cy) / i.fy, 1.0];
            let dw = mat_vec(&rt, &dc);
            let rgb = if dw[2] >= -1e-9 {
                let s = (dw[2] / norm(dw)).clamp(0.0, 1.0);
                [0.6 - 0.3 * s, 0.75 - 0.2 * s, 0.95]
            } else {
                let t = -c[2] / dw[2];
                let (x, y) = (c[0] + t * dw[0], c[1] + t * dw[1]);
                let tile = ((x / 2.0).floor() + (y / 2.0).floor()).rem_euclid(2.0);
                let fine = 0.04 * ((3.1 * x).sin() * (2.7 * y).cos());
                let g = 0.38 + 0.08 * tile + fine;
                [g, g * 0.97, g * 0.9]
            };
            img.set_pixel(v, u, rgb.map(|x| x as f32));
        }
    }
    img
}

/// Projected stadium of one capsule: pixel endpoints, pixel radius, mean depth.
fn capsule_stadium(cam: &CameraRig<f64>, c: &Capsule) -> Option<([f64; 2], [f64; 2], f64, f64)> {
    let pa = cam.project(c.a).ok()?;
    let pb = cam.project(c.b).ok()?;
    if !(pa.depth > 0.05 && pb.depth > 0.05) || !pa.uv[0].is_finite() || !pb.uv[0].is_finite() {
        return None;
    }
    let f = 0.5 * (cam.intrinsics().fx + cam.intrinsics().fy);
    let z = 0.5 * (pa.depth + pb.depth);
    Some((pa.uv, pb.uv, f * c.radius / pa.depth.min(pb.depth), z))
}

/// Paints the capsules far to near with Lambert shading and returns the
/// pixel bounding box `[u0, v0, u1, v1]` (inclusive) of the painted body.
pub fn render_body(img: &mut RgbImage<f32>, cam: &CameraRig<f64>, capsules: &[Capsule], palette: &Palette, light_dir_cam: [f64; 3]) -> Option<[usize; 4]> {
    let l = scale(light_dir_cam, 1.0 / norm(light_dir_cam));
    let mut order: Vec<_> = capsules.iter().filter_map(|c| capsule_stadium(cam, c).map(|s| (s, c.material))).collect();
    order.sort_by(|a, b| b.0 .3.total_cmp(&a.0 .3));
    let (w, h) = (img.width as i64, img.height as i64);
    let mut bbox: Option<[usize; 4]> = None;
    for ((a, b, r, _), mat) in order {
        let r = r.max(0.5);
        let base = match mat {
            0 => palette.skin,
            1 => palette.upper,
            _ => palette.lower,
        };
        let u0 = (a[0].min(b[0]) - r).floor().max(0.0) as i64;
        let u1 = (a[0].max(b[0]) + r).ceil().min((w - 1) as f64) as i64;
        let v0 = (a[1].min(b[1]) - r).floor().max(0.0) as i64;
        let v1 = (a[1].max(b[1]) + r).ceil().min((h - 1) as f64) as i64;
        let ab = [b[0] - a[0], b[1] - a[1]];
        let l2 = ab[0] * ab[0] + ab[1] * ab[1];
        for v in v0..=v1 {
            for u in u0..=u1 {
                let p = [u as f64, v as f64];
                let t = if l2 < 1e-12 { 0.0 } else { (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / l2).clamp(0.0, 1.0) };
                let e = [p[0] - a[0] - t * ab[0], p[1] - a[1] - t * ab[1]];
                let dist = (e[0] * e[0] + e[1] * e[1]).sqrt();
                if dist > r {
                    continue;
                }
                let s = dist / r;
                let (ex, ey) = if dist > 1e-9 { (e[0] / dist, e[1] / dist) } else { (0.0, 0.0) };
                let n = [ex * s, ey * s, -(1.0 - s * s).max(0.0).sqrt()];
                let shade = AMBIENT + (1.0 - AMBIENT) * dot(n, l).max(0.0);
                img.set_pixel(v as usize, u as usize, base.map(|x| (x * shade).clamp(0.0, 1.0) as f32));
                let (uu, vv) = (u as usize, v as usize);
                bbox = Some(match bbox {
                    None => [uu, vv, uu, vv],
                    Some(bb) => [bb[0].min(uu), bb[1].min(vv), bb[2].max(uu), bb[3].max(vv)],
                });
            }
        }
    }
    bbox
}

/// Fills the projected occluder quad with a flat colour.
pub fn render_occluder(img: &mut RgbImage<f32>, cam: &CameraRig<f64>, occ: &Occluder, color: [f64; 3]) {
    let mut q = [[0.0; 2]; 4];
    for (k, c) in occ.corners().iter().enumerate() {
        let Ok(pr) = cam.project(*c) else { return };
        if !(pr.depth > 0.05) || !pr.uv[0].is_finite() {
            return;
        }
        q[k] = pr.uv;
    }
    let cross = |o: [f64; 2], a: [f64; 2], p: [f64; 2]| (a[0] - o[0]) * (p[1] - o[1]) - (a[1] - o[1]) * (p[0] - o[0]);
    let u0 = q.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
    let u1 = q.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max).ceil().min((img.width - 1) as f64);
    let v0 = q.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
    let v1 = q.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max).ceil().min((img.height - 1) as f64);
    if u1 < 0.0 || v1 < 0.0 {
        return;
    }
    for v in v0..=v1 as usize {
        for u in u0..=u1 as usize {
            let p = [u as f64, v as f64];
            let s: Vec<f64> = (0..4).map(|k| cross(q[k], q[(k + 1) % 4], p)).collect();
            if s.iter().all(|&x| x >= 0.0) || s.iter().all(|&x| x <= 0.0) {
                let shade = 0.9 + 0.1 * ((u / 4 + v / 4) % 2) as f64;
                img.set_pixel(v, u, color.map(|x| (x * shade) as f32));
            }
        }
    }
}

// ---------------------------------------------------------------- scenes

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub fraction_with_3d: f64,
    pub occlusion_prob: f64,
    pub seed: u64,
    pub min_distance: f64,
    pub max_distance: f64,
    pub width: u32,
    pub height: u32,
    /// Nominal focal length (pixels).
    pub focal: f64,
    pub camera_height: f64,
    pub lidar_height: f64,
    /// Beam spacing (degrees).
    pub azimuth_step_deg: f64,
    pub elevation_step_deg: f64,
    pub range_sigma: f64,
    /// Standard deviation of additive pixel noise.
    pub pixel_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            fraction_with_3d: 0.065,
            occlusion_prob: 0.3,
            seed: 0,
            min_distance: 2.0,
            max_distance: 40.0,
            width: 320,
            height: 256,
            focal: 200.0,
            camera_height: 1.2,
            lidar_height: 1.8,
            azimuth_step_deg: 0.2,
            elevation_step_deg: 0.3,
            range_sigma: 0.01,
            pixel_noise: 0.02,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid generator config: {0}")]
pub struct SynthConfigError(pub String);

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthConfigError> {
        let bad = |m: &str| Err(SynthConfigError(m.into()));
        if !(0.0..=1.0).contains(&self.fraction_with_3d) || !(0.0..=1.0).contains(&self.occlusion_prob) {
            return bad("fractions must lie in [0, 1]");
        }
        if !(self.min_distance > 0.5 && self.max_distance >= self.min_distance) {
            return bad("need 0.5 < min_distance <= max_distance");
        }
        if self.width < 16 || self.height < 16 || !(self.focal > 0.0) {
            return bad("frame must be at least 16x16 with a positive focal length");
        }
        if !(self.azimuth_step_deg > 0.0 && self.elevation_step_deg > 0.0) || !(self.range_sigma >= 0.0) || !(self.pixel_noise >= 0.0) {
            return bad("beam steps must be positive and noise levels non-negative");
        }
        Ok(())
    }
}

/// Derived per-sample seed.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn random_camera(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> CameraRig<f64> {
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let f = cfg.focal * rng.random_range(0.97..1.03);
    let intr = CameraIntrinsics {
        fx: f,
        fy: f * rng.random_range(0.99..1.01),
        cx: w / 2.0 + rng.random_range(-3.0..3.0),
        cy: h / 2.0 + rng.random_range(-3.0..3.0),
        k1: rng.random_range(-0.05..0.05),
        k2: rng.random_range(-0.01..0.01),
        k3: 0.0,
        p1: rng.random_range(-1e-3..1e-3),
        p2: rng.random_range(-1e-3..1e-3),
        width: cfg.width,
        height: cfg.height,
        row_readout: rng.random_range(20e-6..40e-6),
    };
    // Camera looking along world +x: camera x = -world y, y = -world z.
    let base: Mat3<f64> = [[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]];
    let yaw = rng.random_range(-0.05..0.05);
    let pitch = rng.random_range(-0.03..0.03);
    // World-to-camera = base · (camera-to-world tilt)ᵀ.
    let tilt = mat_mul(&rot_z(yaw), &rot_y(pitch));
    let rotation = mat_mul(&base, &transpose(&tilt));
    let center = [0.0, 0.0, cfg.camera_height];
    let t = mat_vec(&rotation, &center);
    let speed = rng.random_range(0.0..10.0);
    let ext = CameraExtrinsics {
        rotation,
        translation: [-t[0], -t[1], -t[2]],
        linear_velocity: [speed, rng.random_range(-0.3..0.3), 0.0],
        angular_velocity: [0.0, 0.0, rng.random_range(-0.1..0.1)],
    };
    CameraRig::new(intr, ext).expect("generator builds valid rigs")
}

/// Everything about one generated scene, including what the sample record
/// does not keep.
#[derive(Clone, Debug)]
pub struct Scene {
    pub sample: Sample,
    pub capsules: Vec<Capsule>,
    pub occluder: Option<Occluder>,
    pub lidar_origin: [f64; 3],
    /// Every skeleton joint, world frame.
    pub skeleton: Vec<[f64; 3]>,
}

/// Generates one scene. `with_3d` controls whether 3D labels are attached.
pub fn generate_scene(cfg: &SynthConfig, spec: &SkeletonSpec, id: u64, with_3d: bool) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(id);
    let cam = random_camera(cfg, &mut rng);
    let lidar_origin = [0.0, 0.0, cfg.lidar_height];
    let i = *cam.intrinsics();
    let half_fov = ((i.width as f64 / 2.0) / i.fx).atan();
    loop {
        let pose = sample_pose(spec, &mut rng);
        let dist = rng.random_range(cfg.min_distance..=cfg.max_distance);
        let bearing = rng.random_range(-0.7..0.7) * half_fov;
        let heading = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let r = rot_z(heading);
        let ground = pose.joints.iter().map(|p| p[2]).fold(f64::INFINITY, f64::min) - 0.06;
        let origin = [dist * bearing.cos(), dist * bearing.sin(), -ground];
        let skeleton: Vec<[f64; 3]> = pose.joints.iter().map(|p| add(mat_vec(&r, p), origin)).collect();
        let capsules = body_capsules(&skeleton);

        let occluder = (rng.random::<f64>() < cfg.occlusion_prob).then(|| {
            let dir = [bearing.cos(), bearing.sin(), 0.0];
            let gap = rng.random_range(0.8..(0.4 * dist).max(0.9));
            let base = [origin[0] - dir[0] * gap, origin[1] - dir[1] * gap, 0.0];
            let lateral = [-dir[1], dir[0], 0.0];
            if rng.random::<bool>() {
                Occluder { base, lateral, s_range: [-3.0, 3.0], z_range: [0.0, rng.random_range(0.5..1.4)] }
            } else {
                let edge = rng.random_range(-0.3..0.3);
                let s_range = if rng.random::<bool>() { [-3.0, edge] } else { [edge, 3.0] };
                Occluder { base, lateral, s_range, z_range: [0.0, 2.6] }
            }
        });

        let mut image = render_background(&cam);
        let palette = Palette {
            skin: [rng.random_range(0.45..0.95), rng.random_range(0.35..0.75), rng.random_range(0.25..0.6)],
            upper: [rng.random(), rng.random(), rng.random()],
            lower: [rng.random_range(0.0..0.6), rng.random_range(0.0..0.6), rng.random_range(0.0..0.6)],
            occluder: [rng.random_range(0.3..0.7); 3],
        };
        let light = [rng.random_range(-0.5..0.5), rng.random_range(-1.0..-0.3), -1.0];
        let Some(bb) = render_body(&mut image, &cam, &capsules, &palette, light) else { continue };
        if bb[2] < bb[0] + 2 || bb[3] < bb[1] + 2 {
            continue;
        }
        if let Some(o) = &occluder {
            render_occluder(&mut image, &cam, o, palette.occluder);
        }
        if cfg.pixel_noise > 0.0 {
            let n = Normal::new(0.0, cfg.pixel_noise).expect("finite sigma");
            for x in image.data.iter_mut() {
                *x = (*x as f64 + n.sample(&mut rng)).clamp(0.0, 1.0) as f32;
            }
        }

        let c = cam.center();
        let keypoints: Vec<[f64; 3]> = spec.keypoints.iter().map(|&k| skeleton[k]).collect();
        let mut labels2d = Vec::with_capacity(keypoints.len());
        let mut visibility = Vec::with_capacity(keypoints.len());
        for kp in &keypoints {
            let pr = cam.project(*kp).expect("finite joints");
            let blocked = occluder.as_ref().is_some_and(|o| o.blocks(c, *kp));
            visibility.push(pr.valid && !blocked);
            labels2d.push(if pr.uv[0].is_finite() { pr.uv } else { [0.0, 0.0] });
        }

        let grid = RayGrid::covering(&capsules, lidar_origin, cfg.azimuth_step_deg.to_radians(), cfg.elevation_step_deg.to_radians());
        let occ: Vec<Occluder> = occluder.into_iter().collect();
        let cloud = simulate_lidar(&capsules, &occ, lidar_origin, &grid, cfg.range_sigma, &mut rng);

        let box3d = body_box(&capsules, heading);
        let box2d = Box2d { x: bb[0] as f64, y: bb[1] as f64, w: (bb[2] - bb[0]) as f64, h: (bb[3] - bb[1]) as f64 };
        let sample = Sample {
            id,
            image,
            cloud,
            cam,
            box2d,
            box3d,
            labels3d: with_3d.then(|| keypoints.clone()),
            labels2d: Some(labels2d),
            visibility,
        };
        return Scene { sample, capsules, occluder: occ.first().copied(), lidar_origin, skeleton };
    }
}

/// Heading-aligned box around every capsule plus a 5 cm margin.
pub fn body_box(capsules: &[Capsule], heading: f64) -> OrientedBox {
    let rt = transpose(&rot_z(heading));
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for c in capsules {
        for p in [c.a, c.b] {
            let q = mat_vec(&rt, &p);
            for k in 0..3 {
                lo[k] = lo[k].min(q[k] - c.radius);
                hi[k] = hi[k].max(q[k] + c.radius);
            }
        }
    }
    let margin = 0.05;
    let mid = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0, (lo[2] + hi[2]) / 2.0];
    let center = mat_vec(&rot_z(heading), &mid);
    OrientedBox { center, size: [hi[0] - lo[0] + 2.0 * margin, hi[1] - lo[1] + 2.0 * margin, hi[2] - lo[2] + 2.0 * margin], heading }
}

/// In-memory form of a record file.
#[derive(Clone, Debug, PartialEq)]
pub struct RecordFile {
    pub version: u32,
    pub joint_names: Vec<String>,
    pub samples: Vec<Sample>,
}

impl RecordFile {
    pub fn new(samples: Vec<Sample>) -> Self {
        let spec = SkeletonSpec::default();
        Self { version: RECORD_VERSION, joint_names: spec.keypoints.iter().map(|&k| spec.names[k].clone()).collect(), samples }
    }
}

/// Seeded dataset. Sample `i` is generated from its own derived seed, so
/// generation parallelises without changing the output.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<RecordFile, SynthConfigError> {
    Ok(RecordFile::new(generate_map(cfg, |s| s)?))
}

/// Same samples as [`generate_dataset`], each passed through `f` as soon as
/// it exists, so full frames never pile up in memory.
pub fn generate_map<R: Send>(cfg: &SynthConfig, f: impl Fn(Sample) -> R + Sync) -> Result<Vec<R>, SynthConfigError> {
    cfg.validate()?;
    let spec = SkeletonSpec::default();
    let mut label_rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, u64::MAX));
    let with3d: Vec<bool> = (0..cfg.n_samples).map(|_| label_rng.random::<f64>() < cfg.fraction_with_3d).collect();
    Ok((0..cfg.n_samples)
        .into_par_iter()
        .map(|i| f(generate_scene(cfg, &spec, sample_seed(cfg.seed, i as u64), with3d[i]).sample))
        .collect())
}

// ---------------------------------------------------------------- records

pub const RECORD_MAGIC: [u8; 4] = *b"FPRC";
pub const RECORD_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a record file (bad magic)")]
    BadMagic,
    #[error("unsupported record version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("file truncated")]
    Truncated,
    #[error("checksum mismatch in record {0}")]
    Checksum(u64),
    #[error("schema mismatch: {0}")]
    Schema(String),
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], RecordError> {
        if self.buf.len() - self.pos < n {
            return Err(RecordError::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, RecordError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, RecordError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, RecordError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, RecordError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32, RecordError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, RecordError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s<const N: usize>(&mut self) -> Result<[f64; N], RecordError> {
        let mut out = [0.0; N];
        for x in &mut out {
            *x = self.f64()?;
        }
        Ok(out)
    }
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Payload bytes of one sample (layout in the crate README).
pub fn encode_sample(s: &Sample) -> Vec<u8> {
    let mut out = Vec::new();
    let nj = s.visibility.len();
    out.extend_from_slice(&s.id.to_le_bytes());
    out.extend_from_slice(&(nj as u32).to_le_bytes());
    out.extend_from_slice(&(s.image.height as u32).to_le_bytes());
    out.extend_from_slice(&(s.image.width as u32).to_le_bytes());
    for x in &s.image.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out.extend_from_slice(&s.cam.width().to_le_bytes());
    out.extend_from_slice(&s.cam.height().to_le_bytes());
    put_f64s(&mut out, &rig_raw_fields(&s.cam));
    put_f64s(&mut out, &[s.box2d.x, s.box2d.y, s.box2d.w, s.box2d.h]);
    put_f64s(&mut out, &s.box3d.center);
    put_f64s(&mut out, &s.box3d.size);
    put_f64s(&mut out, &[s.box3d.heading]);
    let flags = u8::from(s.labels3d.is_some()) | (u8::from(s.labels2d.is_some()) << 1);
    out.push(flags);
    out.extend(s.visibility.iter().map(|&v| u8::from(v)));
    if let Some(l) = &s.labels3d {
        put_f64s(&mut out, &l.iter().flatten().copied().collect::<Vec<_>>());
    }
    if let Some(l) = &s.labels2d {
        put_f64s(&mut out, &l.iter().flatten().copied().collect::<Vec<_>>());
    }
    out.extend_from_slice(&(s.cloud.len() as u32).to_le_bytes());
    for p in &s.cloud.points {
        for x in p {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

/// Inverse of [`encode_sample`]; `n_joints` is the header's joint count.
pub fn decode_sample(buf: &[u8], n_joints: usize) -> Result<Sample, RecordError> {
    let mut c = Cursor { buf, pos: 0 };
    let id = c.u64()?;
    let nj = c.u32()? as usize;
    if nj != n_joints {
        return Err(RecordError::Schema(format!("record has {nj} joints, header says {n_joints}")));
    }
    let (h, w) = (c.u32()? as usize, c.u32()? as usize);
    let n = h.checked_mul(w).and_then(|x| x.checked_mul(3)).ok_or(RecordError::Truncated)?;
    if n * 4 > buf.len() {
        return Err(RecordError::Truncated);
    }
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(c.f32()?);
    }
    let (cw, ch) = (c.u32()?, c.u32()?);
    let raw: [f64; RIG_FIELD_COUNT] = c.f64s()?;
    let cam = rig_from_raw_fields(&raw, cw, ch).map_err(|e| RecordError::Schema(format!("camera: {e}")))?;
    let b = c.f64s::<4>()?;
    let box2d = Box2d { x: b[0], y: b[1], w: b[2], h: b[3] };
    let box3d = OrientedBox { center: c.f64s()?, size: c.f64s()?, heading: c.f64()? };
    let flags = c.u8()?;
    if flags > 3 {
        return Err(RecordError::Schema(format!("unknown label flags {flags:#x}")));
    }
    let mut visibility = Vec::with_capacity(nj);
    for _ in 0..nj {
        visibility.push(match c.u8()? {
            0 => false,
            1 => true,
            v => return Err(RecordError::Schema(format!("visibility byte {v}"))),
        });
    }
    let labels3d = if flags & 1 != 0 { Some((0..nj).map(|_| c.f64s::<3>()).collect::<Result<Vec<_>, _>>()?) } else { None };
    let labels2d = if flags & 2 != 0 { Some((0..nj).map(|_| c.f64s::<2>()).collect::<Result<Vec<_>, _>>()?) } else { None };
    let np = c.u32()? as usize;
    if np.saturating_mul(12) > buf.len() - c.pos {
        return Err(RecordError::Truncated);
    }
    let mut points = Vec::with_capacity(np);
    for _ in 0..np {
        points.push([c.f32()?, c.f32()?, c.f32()?]);
    }
    if c.pos != buf.len() {
        return Err(RecordError::Schema("trailing bytes in record".into()));
    }
    Ok(Sample { id, image: RgbImage { height: h, width: w, data }, cloud: PointCloud::new(points), cam, box2d, box3d, labels3d, labels2d, visibility })
}

/// Serialises a whole file: header, then per record `u32` payload length,
/// `u32` CRC-32 of the payload, payload.
pub fn encode_records(file: &RecordFile) -> Result<Vec<u8>, RecordError> {
    let nj = file.joint_names.len();
    let mut out = Vec::new();
    out.extend_from_slice(&RECORD_MAGIC);
    out.extend_from_slice(&file.version.to_le_bytes());
    out.extend_from_slice(&(nj as u32).to_le_bytes());
    for name in &file.joint_names {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
    }
    out.extend_from_slice(&(file.samples.len() as u64).to_le_bytes());
    for s in &file.samples {
        if s.visibility.len() != nj {
            return Err(RecordError::Schema(format!("sample {} has {} joints, file has {nj}", s.id, s.visibility.len())));
        }
        let payload = encode_sample(s);
        out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        out.extend_from_slice(&payload);
    }
    Ok(out)
}

pub fn decode_records(buf: &[u8]) -> Result<RecordFile, RecordError> {
    let mut c = Cursor { buf, pos: 0 };
    if buf.len() < 4 {
        return Err(if buf.is_empty() || RECORD_MAGIC.starts_with(buf) { RecordError::Truncated } else { RecordError::BadMagic });
    }
    if c.take(4)? != RECORD_MAGIC {
        return Err(RecordError::BadMagic);
    }
    let version = c.u32()?;
    if version != RECORD_VERSION {
        return Err(RecordError::Version { found: version, expected: RECORD_VERSION });
    }
    let nj = c.u32()? as usize;
    let mut joint_names = Vec::with_capacity(nj.min(1024));
    for _ in 0..nj {
        let len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(len)?).map_err(|_| RecordError::Schema("joint name is not UTF-8".into()))?;
        joint_names.push(name.to_string());
    }
    let count = c.u64()?;
    let mut samples = Vec::with_capacity(count.min(1 << 16) as usize);
    for k in 0..count {
        let len = c.u32()? as usize;
        let crc = c.u32()?;
        let payload = c.take(len)?;
        if crc32fast::hash(payload) != crc {
            return Err(RecordError::Checksum(k));
        }
        samples.push(decode_sample(payload, nj)?);
    }
    if c.pos != buf.len() {
        return Err(RecordError::Schema(format!("header announces {count} records but more data follows")));
    }
    Ok(RecordFile { version, joint_names, samples })
}

pub fn write_records(path: &Path, file: &RecordFile) -> Result<(), RecordError> {
    let bytes = encode_records(file)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<RecordFile, RecordError> {
    let mut buf = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut buf)?;
    decode_records(&buf)
}

/// Human-readable view of a sample (image reduced to its size).
#[derive(Serialize)]
struct SampleJson<'a> {
    id: u64,
    image_size: [usize; 2],
    camera_fields: Vec<f64>,
    box2d: [f64; 4],
    box3d: &'a OrientedBox,
    labels3d: &'a Option<Vec<[f64; 3]>>,
    labels2d: &'a Option<Vec<[f64; 2]>>,
    visibility: &'a [bool],
    points: &'a [[f32; 3]],
}

/// One JSON object per sample, newline-separated.
pub fn export_jsonl(file: &RecordFile, out: &mut impl Write) -> std::io::Result<()> {
    for s in &file.samples {
        let j = SampleJson {
            id: s.id,
            image_size: [s.image.height, s.image.width],
            camera_fields: rig_raw_fields(&s.cam),
            box2d: [s.box2d.x, s.box2d.y, s.box2d.w, s.box2d.h],
            box3d: &s.box3d,
            labels3d: &s.labels3d,
            labels2d: &s.labels2d,
            visibility: &s.visibility,
            points: &s.cloud.points,
        };
        serde_json::to_writer(&mut *out, &j)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Signed distance from `p` to the nearest capsule surface (negative inside).
pub fn capsule_surface_distance(p: [f64; 3], capsules: &[Capsule]) -> f64 {
    capsules.iter().map(|c| point_segment_distance(p, c.a, c.b) - c.radius).fold(f64::INFINITY, f64::min)
}

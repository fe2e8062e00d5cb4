//! Camera model: pinhole intrinsics, Brown–Conrady distortion and a
//! constant-velocity rolling-shutter correction.
//!
//! Frames: world is z-up; the camera frame is x right, y down, z forward.
//! Pixel centres sit on integer coordinates; `u` is the column and `v` the
//! row.
//!
//! Rolling shutter: row `v` is exposed at `t = v * row_readout` seconds. At
//! time `t` the camera centre is `c0 + linear_velocity * t` and its
//! camera-to-world rotation is `Exp(angular_velocity * t) * R0ᵀ` (velocities in
//! the world frame), so a world point maps to
//! `x_c = R0 * Exp(ω t)ᵀ * (p - c0 - v t)`. The capture row depends on the
//! projection itself and is found by [`SHUTTER_ITERATIONS`] fixed-point
//! steps starting from `t = 0`.

use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{Jet, Scalar};

pub type Vec3<T> = [T; 3];
pub type Mat3<T> = [[T; 3]; 3];

/// Fixed-point iterations used to solve for the capture row.
pub const SHUTTER_ITERATIONS: usize = 3;

/// Camera-frame depth below which a point counts as behind the camera.
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("non-finite input to camera projection")]
    NonFinite,
    #[error("rotation is not orthonormal with det +1 (error {0:.3e})")]
    InvalidRotation(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub k1: T,
    pub k2: T,
    pub k3: T,
    pub p1: T,
    pub p2: T,
    pub width: u32,
    pub height: u32,
    /// Seconds between the exposure of consecutive rows.
    pub row_readout: T,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraExtrinsics<T> {
    /// World-to-camera rotation.
    pub rotation: Mat3<T>,
    /// World-to-camera translation (m).
    pub translation: Vec3<T>,
    /// m/s, world frame.
    pub linear_velocity: Vec3<T>,
    /// rad/s, world frame.
    pub angular_velocity: Vec3<T>,
}

/// Validated intrinsics + extrinsics pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRig<T> {
    intrinsics: CameraIntrinsics<T>,
    extrinsics: CameraExtrinsics<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection<T> {
    pub uv: [T; 2],
    /// Camera-frame depth at the solved capture time.
    pub depth: T,
    pub valid: bool,
}

fn rotation_error<T: Float>(r: &Mat3<T>) -> f64 {
    let mut err = 0.0f64;
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| r[k][i].to_f64().unwrap() * r[k][j].to_f64().unwrap()).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            err = err.max((dot - want).abs());
        }
    }
    let det = det3(&r.map(|row| row.map(|x| x.to_f64().unwrap())));
    err.max((det - 1.0).abs())
}

impl<T: Float> CameraRig<T> {
    /// Validates the invariants of both halves. The rotation tolerance is
    /// `1e-9`, widened to `100 ε` for types coarser than `f64`.
    pub fn new(intrinsics: CameraIntrinsics<T>, extrinsics: CameraExtrinsics<T>) -> Result<Self, GeometryError> {
        let i = &intrinsics;
        let all = [i.fx, i.fy, i.cx, i.cy, i.k1, i.k2, i.k3, i.p1, i.p2, i.row_readout];
        let e = &extrinsics;
        let finite = all.iter().all(|x| x.is_finite())
            && e.rotation.iter().flatten().chain(&e.translation).chain(&e.linear_velocity).chain(&e.angular_velocity).all(|x| x.is_finite());
        if !finite {
            return Err(GeometryError::NonFinite);
        }
        if i.width == 0 || i.height == 0 {
            return Err(GeometryError::InvalidIntrinsics("image size must be positive".into()));
        }
        if i.fx <= T::zero() || i.fy <= T::zero() {
            return Err(GeometryError::InvalidIntrinsics("focal lengths must be positive".into()));
        }
        let (w, h) = (T::from(i.width).unwrap(), T::from(i.height).unwrap());
        if i.cx < T::zero() || i.cx >= w || i.cy < T::zero() || i.cy >= h {
            return Err(GeometryError::InvalidIntrinsics("principal point outside the image".into()));
        }
        if i.row_readout < T::zero() {
            return Err(GeometryError::InvalidIntrinsics("row readout must be non-negative".into()));
        }
        let tol = 1e-9f64.max(100.0 * T::epsilon().to_f64().unwrap());
        let err = rotation_error(&e.rotation);
        if err.is_nan() || err > tol {
            return Err(GeometryError::InvalidRotation(err));
        }
        Ok(Self { intrinsics, extrinsics })
    }

    pub fn intrinsics(&self) -> &CameraIntrinsics<T> {
        &self.intrinsics
    }

    pub fn extrinsics(&self) -> &CameraExtrinsics<T> {
        &self.extrinsics
    }

    pub fn width(&self) -> u32 {
        self.intrinsics.width
    }

    pub fn height(&self) -> u32 {
        self.intrinsics.height
    }

    /// Camera centre in the world frame at `t = 0`.
    pub fn center(&self) -> Vec3<T> {
        let r = &self.extrinsics.rotation;
        let t = &self.extrinsics.translation;
        let rt = mat_vec(&transpose(r), t);
        [-rt[0], -rt[1], -rt[2]]
    }

    /// Converts every numeric field; the invariants carry over.
    pub fn cast<U: Float>(&self) -> CameraRig<U> {
        let c = |x: T| U::from(x).unwrap();
        let v = |x: Vec3<T>| x.map(c);
        let i = &self.intrinsics;
        let e = &self.extrinsics;
        CameraRig {
            intrinsics: CameraIntrinsics {
                fx: c(i.fx),
                fy: c(i.fy),
                cx: c(i.cx),
                cy: c(i.cy),
                k1: c(i.k1),
                k2: c(i.k2),
                k3: c(i.k3),
                p1: c(i.p1),
                p2: c(i.p2),
                width: i.width,
                height: i.height,
                row_readout: c(i.row_readout),
            },
            extrinsics: CameraExtrinsics {
                rotation: e.rotation.map(v),
                translation: v(e.translation),
                linear_velocity: v(e.linear_velocity),
                angular_velocity: v(e.angular_velocity),
            },
        }
    }

    /// Camera-frame coordinates of a world point for capture time `t`.
    pub fn to_camera_at(&self, p: Vec3<T>, t: T) -> Vec3<T> {
        let e = &self.extrinsics;
        let c0 = self.center();
        let d = [
            p[0] - c0[0] - e.linear_velocity[0] * t,
            p[1] - c0[1] - e.linear_velocity[1] * t,
            p[2] - c0[2] - e.linear_velocity[2] * t,
        ];
        let w = e.angular_velocity.map(|x| x * t);
        let spin = transpose(&so3_exp(w));
        mat_vec(&e.rotation, &mat_vec(&spin, &d))
    }

    /// Distortion and intrinsics applied to a camera-frame point with `z > 0`.
    pub fn camera_to_pixel(&self, pc: Vec3<T>) -> [T; 2] {
        let i = &self.intrinsics;
        let x = pc[0] / pc[2];
        let y = pc[1] / pc[2];
        let two = T::one() + T::one();
        let r2 = x * x + y * y;
        let radial = T::one() + r2 * (i.k1 + r2 * (i.k2 + r2 * i.k3));
        let xd = x * radial + two * i.p1 * x * y + i.p2 * (r2 + two * x * x);
        let yd = y * radial + i.p1 * (r2 + two * y * y) + two * i.p2 * x * y;
        [i.fx * xd + i.cx, i.fy * yd + i.cy]
    }

    fn in_image(&self, uv: [T; 2]) -> bool {
        let w = T::from(self.intrinsics.width).unwrap();
        let h = T::from(self.intrinsics.height).unwrap();
        uv[0] >= T::zero() && uv[0] < w && uv[1] >= T::zero() && uv[1] < h
    }

    /// World point to pixel with `iterations` rolling-shutter refinements.
    pub fn project_with_iterations(&self, p: Vec3<T>, iterations: usize) -> Result<Projection<T>, GeometryError> {
        if !p.iter().all(|x| x.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let min_depth = T::from(MIN_DEPTH).unwrap();
        let h = T::from(self.intrinsics.height).unwrap();
        let mut t = T::zero();
        let mut it = 0;
        loop {
            let pc = self.to_camera_at(p, t);
            if pc[2].is_nan() || pc[2] <= min_depth {
                return Ok(Projection { uv: [T::nan(), T::nan()], depth: pc[2], valid: false });
            }
            let uv = self.camera_to_pixel(pc);
            if it == iterations {
                let valid = uv[0].is_finite() && uv[1].is_finite() && self.in_image(uv);
                return Ok(Projection { uv, depth: pc[2], valid });
            }
            t = uv[1].max(T::zero()).min(h) * self.intrinsics.row_readout;
            it += 1;
        }
    }

    /// Projection with the standard number of shutter iterations.
    pub fn project(&self, p: Vec3<T>) -> Result<Projection<T>, GeometryError> {
        self.project_with_iterations(p, SHUTTER_ITERATIONS)
    }

    /// Element-wise [`CameraRig::project`].
    pub fn project_batch(&self, points: &[Vec3<T>]) -> Result<(Vec<[T; 2]>, Vec<bool>), GeometryError> {
        let mut uv = Vec::with_capacity(points.len());
        let mut valid = Vec::with_capacity(points.len());
        for &p in points {
            let pr = self.project(p)?;
            uv.push(pr.uv);
            valid.push(pr.valid);
        }
        Ok((uv, valid))
    }
}

impl<T: Scalar> CameraRig<T> {
    /// Projection together with `d(u, v) / d(point)` as a 2x3 matrix.
    pub fn project_with_jacobian(&self, p: Vec3<T>) -> Result<(Projection<T>, [[T; 3]; 2]), GeometryError> {
        let rig: CameraRig<Jet<T, 3>> = self.cast();
        let pj = [Jet::variable(p[0], 0), Jet::variable(p[1], 1), Jet::variable(p[2], 2)];
        let pr = rig.project(pj)?;
        let jac = [pr.uv[0].eps, pr.uv[1].eps];
        Ok((Projection { uv: [pr.uv[0].re, pr.uv[1].re], depth: pr.depth.re, valid: pr.valid }, jac))
    }
}

/// Layout of [`CameraVector`]: offsets of each block.
pub mod camera_layout {
    /// First two rows of the world-to-camera rotation; the third row is
    /// their cross product.
    pub const ROTATION: usize = 0;
    pub const TRANSLATION: usize = 6;
    pub const LINEAR_VELOCITY: usize = 9;
    pub const ANGULAR_VELOCITY: usize = 12;
    pub const FX: usize = 15;
    pub const FY: usize = 16;
    pub const CX: usize = 17;
    pub const CY: usize = 18;
    /// k1, k2, k3, p1, p2.
    pub const DISTORTION: usize = 19;
    pub const ROW_READOUT: usize = 24;
    pub const LEN: usize = 25;
}

/// Length of the flattened camera vector.
pub const CAMERA_VECTOR_LEN: usize = camera_layout::LEN;

/// Number of raw rig fields (full rotation) in the on-disk order.
pub const RIG_FIELD_COUNT: usize = 28;

/// Scale applied to linear velocities (m/s) in the camera vector.
pub const LINEAR_VELOCITY_SCALE: f64 = 10.0;
/// Scale applied to angular velocities (rad/s) in the camera vector.
pub const ANGULAR_VELOCITY_SCALE: f64 = 1.0;

/// Camera token prefix shared by every point token of a sample.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraVector<T> {
    pub values: Vec<T>,
}

/// Flattens a rig as `[rotation rows 0-1 (6, row-major), translation(3),
/// linear_velocity / 10, angular_velocity / 1, fx/W, fy/W, cx/W, cy/W,
/// k1, k2, k3, p1, p2, row_readout]`; `W` is the image width in pixels.
pub fn flatten_camera<T: Float>(rig: &CameraRig<T>) -> CameraVector<T> {
    let raw = rig_raw_fields(rig);
    let w = T::from(rig.width()).unwrap();
    let lv = T::from(LINEAR_VELOCITY_SCALE).unwrap();
    let av = T::from(ANGULAR_VELOCITY_SCALE).unwrap();
    // Drop the third rotation row.
    let mut values: Vec<T> = raw[..6].iter().chain(&raw[9..]).copied().collect();
    use camera_layout::*;
    for x in &mut values[LINEAR_VELOCITY..LINEAR_VELOCITY + 3] {
        *x = *x / lv;
    }
    for x in &mut values[ANGULAR_VELOCITY..ANGULAR_VELOCITY + 3] {
        *x = *x / av;
    }
    for idx in [FX, FY, CX, CY] {
        values[idx] = values[idx] / w;
    }
    CameraVector { values }
}

/// Raw rig fields without normalization: `[rotation(9, row-major),
/// translation(3), linear_velocity(3), angular_velocity(3), fx, fy, cx, cy,
/// k1, k2, k3, p1, p2, row_readout]`. This is the on-disk field order of a rig.
pub fn rig_raw_fields<T: Float>(rig: &CameraRig<T>) -> Vec<T> {
    let i = rig.intrinsics();
    let e = rig.extrinsics();
    let mut v = Vec::with_capacity(RIG_FIELD_COUNT);
    v.extend(e.rotation.iter().flatten().copied());
    v.extend(e.translation);
    v.extend(e.linear_velocity);
    v.extend(e.angular_velocity);
    v.extend([i.fx, i.fy, i.cx, i.cy, i.k1, i.k2, i.k3, i.p1, i.p2, i.row_readout]);
    v
}

/// Inverse of [`rig_raw_fields`].
pub fn rig_from_raw_fields<T: Float>(v: &[T], width: u32, height: u32) -> Result<CameraRig<T>, GeometryError> {
    if v.len() != RIG_FIELD_COUNT {
        return Err(GeometryError::InvalidIntrinsics(format!("expected {RIG_FIELD_COUNT} fields, got {}", v.len())));
    }
    let r = [[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]];
    CameraRig::new(
        CameraIntrinsics {
            fx: v[18],
            fy: v[19],
            cx: v[20],
            cy: v[21],
            k1: v[22],
            k2: v[23],
            k3: v[24],
            p1: v[25],
            p2: v[26],
            width,
            height,
            row_readout: v[27],
        },
        CameraExtrinsics {
            rotation: r,
            translation: [v[9], v[10], v[11]],
            linear_velocity: [v[12], v[13], v[14]],
            angular_velocity: [v[15], v[16], v[17]],
        },
    )
}

/// Oriented 3D box: yaw about world z.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub heading: f64,
}

impl OrientedBox {
    /// Box-to-world rotation.
    pub fn rotation<T: Float>(&self) -> Mat3<T> {
        rot_z(T::from(self.heading).unwrap())
    }

    pub fn to_box_frame<T: Float>(&self, p: Vec3<T>) -> Vec3<T> {
        let c = self.center.map(|x| T::from(x).unwrap());
        let d = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
        mat_vec(&transpose(&self.rotation()), &d)
    }

    pub fn to_world<T: Float>(&self, p: Vec3<T>) -> Vec3<T> {
        let c = self.center.map(|x| T::from(x).unwrap());
        let r = mat_vec(&self.rotation(), &p);
        [r[0] + c[0], r[1] + c[1], r[2] + c[2]]
    }
}

/// 2D pixel box (top-left corner and extent).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box2d {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

pub fn mat_vec<T: Float>(m: &Mat3<T>, v: &Vec3<T>) -> Vec3<T> {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat_mul<T: Float>(a: &Mat3<T>, b: &Mat3<T>) -> Mat3<T> {
    let mut out = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn transpose<T: Float>(m: &Mat3<T>) -> Mat3<T> {
    [[m[0][0], m[1][0], m[2][0]], [m[0][1], m[1][1], m[2][1]], [m[0][2], m[1][2], m[2][2]]]
}

pub fn det3(m: &Mat3<f64>) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub fn rot_z<T: Float>(yaw: T) -> Mat3<T> {
    let (s, c) = yaw.sin_cos();
    let (o, z) = (T::one(), T::zero());
    [[c, -s, z], [s, c, z], [z, z, o]]
}

pub fn rot_x<T: Float>(a: T) -> Mat3<T> {
    let (s, c) = a.sin_cos();
    let (o, z) = (T::one(), T::zero());
    [[o, z, z], [z, c, -s], [z, s, c]]
}

pub fn rot_y<T: Float>(a: T) -> Mat3<T> {
    let (s, c) = a.sin_cos();
    let (o, z) = (T::one(), T::zero());
    [[c, z, s], [z, o, z], [-s, z, c]]
}

/// Rotation matrix of a rotation vector (Rodrigues). Exactly the identity
/// for the zero vector.
pub fn so3_exp<T: Float>(w: Vec3<T>) -> Mat3<T> {
    let th2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
    let one = T::one();
    let (a, b) = if th2 < T::from(1e-8).unwrap() {
        let half = T::from(0.5).unwrap();
        (one - th2 / T::from(6.0).unwrap(), half - th2 / T::from(24.0).unwrap())
    } else {
        let th = th2.sqrt();
        (th.sin() / th, (one - th.cos()) / th2)
    };
    let k = [[T::zero(), -w[2], w[1]], [w[2], T::zero(), -w[0]], [-w[1], w[0], T::zero()]];
    let k2 = mat_mul(&k, &k);
    let mut r = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let id = if i == j { one } else { T::zero() };
            r[i][j] = id + a * k[i][j] + b * k2[i][j];
        }
    }
    r
}

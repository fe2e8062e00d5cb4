#![allow(dead_code)]

use fusepose::autograd::{Graph, Var};
use fusepose::backbone::UNetConfig;
use fusepose::fusion::ModelConfig;
use fusepose::geometry::{mat_mul, mat_vec, rot_x, rot_y, rot_z, transpose, CameraExtrinsics, CameraIntrinsics, CameraRig, Vec3, SHUTTER_ITERATIONS};
use fusepose::gradcheck::{central_difference, max_rel_err};
use fusepose::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

pub fn random_rig(rng: &mut ChaCha8Rng, distortion: bool, moving: bool) -> CameraRig<f64> {
    let rot = mat_mul(&rot_x(rng.random_range(-0.3..0.3)), &mat_mul(&rot_y(rng.random_range(-0.5..0.5)), &rot_z(rng.random_range(-0.4..0.4))));
    let d = |rng: &mut ChaCha8Rng, s: f64| if distortion { rng.random_range(-s..s) } else { 0.0 };
    let v = |rng: &mut ChaCha8Rng, s: f64| if moving { rng.random_range(-s..s) } else { 0.0 };
    CameraRig::new(
        CameraIntrinsics {
            fx: rng.random_range(200.0..400.0),
            fy: rng.random_range(200.0..400.0),
            cx: rng.random_range(140.0..180.0),
            cy: rng.random_range(100.0..140.0),
            k1: d(rng, 0.1),
            k2: d(rng, 0.02),
            k3: d(rng, 0.005),
            p1: d(rng, 0.002),
            p2: d(rng, 0.002),
            width: 320,
            height: 240,
            row_readout: 3e-5,
        },
        CameraExtrinsics {
            rotation: rot,
            translation: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
            linear_velocity: [v(rng, 10.0), v(rng, 10.0), v(rng, 2.0)],
            angular_velocity: [v(rng, 0.5), v(rng, 0.5), v(rng, 0.5)],
        },
    )
    .unwrap()
}

/// World point in front of the rig, roughly inside the image.
pub fn visible_point(rng: &mut ChaCha8Rng, rig: &CameraRig<f64>) -> Vec3<f64> {
    let z: f64 = rng.random_range(2.0..30.0);
    let pc = [rng.random_range(-0.3..0.3) * z, rng.random_range(-0.25..0.25) * z, z];
    let e = rig.extrinsics();
    let d = [pc[0] - e.translation[0], pc[1] - e.translation[1], pc[2] - e.translation[2]];
    mat_vec(&transpose(&e.rotation), &d)
}

/// Projection written out term by term, sharing no code with the rig.
pub fn oracle_project(rig: &CameraRig<f64>, p: [f64; 3]) -> [f64; 2] {
    let i = rig.intrinsics();
    let e = rig.extrinsics();
    let r = e.rotation;
    let tr = e.translation;
    let c0: Vec<f64> = (0..3).map(|k| -(r[0][k] * tr[0] + r[1][k] * tr[1] + r[2][k] * tr[2])).collect();
    let mut time = 0.0f64;
    let mut uv = [0.0; 2];
    for _ in 0..=SHUTTER_ITERATIONS {
        let w: Vec<f64> = e.angular_velocity.iter().map(|x| x * time).collect();
        let th = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
        let d: Vec<f64> = (0..3).map(|k| p[k] - c0[k] - e.linear_velocity[k] * time).collect();
        let rotated = if th == 0.0 {
            d.clone()
        } else {
            let axis: Vec<f64> = w.iter().map(|x| -x / th).collect();
            let dot = axis[0] * d[0] + axis[1] * d[1] + axis[2] * d[2];
            let cross = [axis[1] * d[2] - axis[2] * d[1], axis[2] * d[0] - axis[0] * d[2], axis[0] * d[1] - axis[1] * d[0]];
            (0..3).map(|k| d[k] * th.cos() + cross[k] * th.sin() + axis[k] * dot * (1.0 - th.cos())).collect()
        };
        let pc: Vec<f64> = (0..3).map(|row| r[row][0] * rotated[0] + r[row][1] * rotated[1] + r[row][2] * rotated[2]).collect();
        let (x, y) = (pc[0] / pc[2], pc[1] / pc[2]);
        let r2 = x * x + y * y;
        let rad = 1.0 + i.k1 * r2 + i.k2 * r2 * r2 + i.k3 * r2 * r2 * r2;
        let xd = x * rad + 2.0 * i.p1 * x * y + i.p2 * (r2 + 2.0 * x * x);
        let yd = y * rad + i.p1 * (r2 + 2.0 * y * y) + 2.0 * i.p2 * x * y;
        uv = [i.fx * xd + i.cx, i.fy * yd + i.cy];
        time = uv[1].clamp(0.0, i.height as f64) * i.row_readout;
    }
    uv
}

/// A model small enough for finite differences.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        crop_size: 8,
        max_points: 16,
        unet: UNetConfig { in_channels: 4, encoder: vec![4, 4], decoder: vec![4, 4], out_channels: 4 },
        rff_sigma: 1.0,
        rff_dim: 8,
        d_model: 8,
        heads: 2,
        layers: 1,
        ffn_mult: 2,
        ..ModelConfig::default()
    }
}

/// Analytic gradient of `Σ build(x) ⊙ probe` against central differences;
/// returns the max relative error.
pub fn grad_err(x0: &Tensor<f64>, probe_seed: u64, h: f64, floor: f64, build: impl Fn(&mut Graph<f64>, Var) -> Var) -> f64 {
    let shape = {
        let mut g = Graph::new();
        let x = g.constant(x0.clone());
        let y = build(&mut g, x);
        g.shape(y).to_vec()
    };
    let probe = rand_tensor(&mut rng(probe_seed), &shape, 1.0);
    let eval = |x: &Tensor<f64>| {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = build(&mut g, xv);
        let w = g.constant(probe.clone());
        let p = g.mul(y, w);
        let s = g.sum(p);
        g.value(s).data()[0]
    };
    let mut g = Graph::new();
    let xv = g.variable(x0.clone());
    let y = build(&mut g, xv);
    let w = g.constant(probe.clone());
    let p = g.mul(y, w);
    let s = g.sum(p);
    let grads = g.backward(s);
    let analytic = grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x0.shape()));
    let numeric = central_difference(&eval, x0, h);
    max_rel_err(analytic.data(), numeric.data(), floor)
}

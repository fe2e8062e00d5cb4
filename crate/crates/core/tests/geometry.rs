mod common;

use common::{oracle_project, random_rig, rng, visible_point};
use fusepose::geometry::*;
use fusepose::gradcheck::rel_err;
use proptest::prelude::*;

fn camera_to_world(rig: &CameraRig<f64>, pc: Vec3<f64>) -> Vec3<f64> {
    let e = rig.extrinsics();
    mat_vec(&transpose(&e.rotation), &[pc[0] - e.translation[0], pc[1] - e.translation[1], pc[2] - e.translation[2]])
}

#[test]
fn optical_axis_hits_principal_point() {
    for seed in 0..20 {
        let rig = random_rig(&mut rng(seed), false, false);
        let pr = rig.project(camera_to_world(&rig, [0.0, 0.0, 7.0])).unwrap();
        assert!(pr.valid);
        assert!((pr.uv[0] - rig.intrinsics().cx).abs() < 1e-9);
        assert!((pr.uv[1] - rig.intrinsics().cy).abs() < 1e-9);
    }
}

#[test]
fn shutter_is_noop_without_motion() {
    let mut r = rng(2);
    for _ in 0..50 {
        let rig = random_rig(&mut r, true, false);
        let p = visible_point(&mut r, &rig);
        assert_eq!(rig.project_with_iterations(p, 0).unwrap(), rig.project_with_iterations(p, 3).unwrap());
    }
}

#[test]
fn matches_independent_formula() {
    let mut r = rng(3);
    for _ in 0..500 {
        let rig = random_rig(&mut r, true, true);
        let p = visible_point(&mut r, &rig);
        let got = rig.project(p).unwrap().uv;
        let want = oracle_project(&rig, p);
        assert!((got[0] - want[0]).abs() < 1e-9 && (got[1] - want[1]).abs() < 1e-9, "{got:?} vs {want:?}");
    }
}

#[test]
fn jacobian_matches_finite_differences() {
    let mut r = rng(4);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let rig = random_rig(&mut r, true, true);
        let p = visible_point(&mut r, &rig);
        let (pr, jac) = rig.project_with_jacobian(p).unwrap();
        let plain = rig.project(p).unwrap();
        assert!(pr.valid == plain.valid && (0..2).all(|k| (pr.uv[k] - plain.uv[k]).abs() < 1e-9));
        let h = 1e-5;
        for k in 0..3 {
            let (mut pp, mut pm) = (p, p);
            pp[k] += h;
            pm[k] -= h;
            let (a, b) = (rig.project(pp).unwrap().uv, rig.project(pm).unwrap().uv);
            for o in 0..2 {
                worst = worst.max(rel_err(jac[o][k], (a[o] - b[o]) / (2.0 * h), 1e-6));
            }
        }
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn focal_scaling_scales_offsets() {
    let mut r = rng(5);
    for _ in 0..50 {
        let rig = random_rig(&mut r, false, true);
        let mut i1 = *rig.intrinsics();
        i1.row_readout = 0.0;
        let mut i2 = i1;
        i2.fx *= 2.0;
        i2.fy *= 2.0;
        let r1 = CameraRig::new(i1, *rig.extrinsics()).unwrap();
        let r2 = CameraRig::new(i2, *rig.extrinsics()).unwrap();
        let p = visible_point(&mut r, &rig);
        let (a, b) = (r1.project(p).unwrap().uv, r2.project(p).unwrap().uv);
        for (k, c) in [i1.cx, i1.cy].into_iter().enumerate() {
            assert!((2.0 * (a[k] - c) - (b[k] - c)).abs() < 1e-9);
        }
    }
}

#[test]
fn batch_is_elementwise() {
    let mut r = rng(7);
    let rig = random_rig(&mut r, true, true);
    let pts: Vec<_> = (0..100).map(|_| visible_point(&mut r, &rig)).collect();
    let (uv, valid) = rig.project_batch(&pts).unwrap();
    for (i, p) in pts.iter().enumerate() {
        let one = rig.project(*p).unwrap();
        assert_eq!((uv[i], valid[i]), (one.uv, one.valid));
    }
    let (uv1, v1) = rig.project_batch(&pts[..1]).unwrap();
    assert_eq!((uv1[0], v1[0]), (uv[0], valid[0]));
    let (e, v) = rig.project_batch(&[]).unwrap();
    assert!(e.is_empty() && v.is_empty());
}

#[test]
fn outside_frame_is_invalid() {
    let rig = random_rig(&mut rng(10), false, false);
    let i = *rig.intrinsics();
    // Far off to the side but in front of the camera.
    let pc = [50.0 * (i.width as f64) / i.fx, 0.0, 1.0];
    let pr = rig.project(camera_to_world(&rig, pc)).unwrap();
    assert!(!pr.valid && pr.uv[0] > i.width as f64);
}

#[test]
fn errors() {
    let rig = random_rig(&mut rng(8), false, false);
    assert_eq!(rig.project([f64::NAN, 0.0, 1.0]), Err(GeometryError::NonFinite));
    let mut e = *rig.extrinsics();
    e.rotation[0][0] += 1e-6;
    assert!(matches!(CameraRig::new(*rig.intrinsics(), e), Err(GeometryError::InvalidRotation(_))));
    let mut e = *rig.extrinsics();
    e.rotation[0] = e.rotation[0].map(|x| -x);
    assert!(matches!(CameraRig::new(*rig.intrinsics(), e), Err(GeometryError::InvalidRotation(_))));
    let mut i = *rig.intrinsics();
    i.fx = 0.0;
    assert!(CameraRig::new(i, *rig.extrinsics()).is_err());
}

#[test]
fn camera_vector_layout() {
    let rig = CameraRig::new(
        CameraIntrinsics { fx: 1.0, fy: 1.0, cx: 0.0, cy: 0.0, k1: 0.0, k2: 0.0, k3: 0.0, p1: 0.0, p2: 0.0, width: 4, height: 2, row_readout: 0.0 },
        CameraExtrinsics { rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], translation: [0.0; 3], linear_velocity: [0.0; 3], angular_velocity: [0.0; 3] },
    )
    .unwrap();
    let v = flatten_camera(&rig).values;
    assert_eq!(v.len(), 25);
    let mut want = vec![0.0; 25];
    want[0] = 1.0;
    want[4] = 1.0;
    want[15] = 0.25;
    want[16] = 0.25;
    assert_eq!(v, want);
}

#[test]
fn camera_vector_distinct_and_invertible() {
    let mut r = rng(9);
    let a = random_rig(&mut r, true, true);
    let b = random_rig(&mut r, true, true);
    let (va, vb) = (flatten_camera(&a), flatten_camera(&b));
    assert_ne!(va, vb);
    // Independent parser: index 15 holds fx / width.
    assert!((va.values[15] * 320.0 - a.intrinsics().fx).abs() < 1e-12);
    assert!((va.values[9] * LINEAR_VELOCITY_SCALE - a.extrinsics().linear_velocity[0]).abs() < 1e-12);
    let raw = rig_raw_fields(&a);
    assert_eq!(raw.len(), RIG_FIELD_COUNT);
    assert_eq!(rig_from_raw_fields(&raw, 320, 240).unwrap(), a);
}

proptest! {
    #[test]
    fn behind_camera_never_valid(seed in 0u64..10_000, x in -5.0f64..5.0, y in -5.0f64..5.0, z in -20.0f64..0.0) {
        let rig = random_rig(&mut rng(seed), true, seed % 2 == 0);
        let pr = rig.project(camera_to_world(&rig, [x, y, z])).unwrap();
        prop_assert!(!pr.valid);
    }

    #[test]
    fn valid_projections_land_in_frame(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let rig = random_rig(&mut r, true, true);
        let p = visible_point(&mut r, &rig);
        let pr = rig.project(p).unwrap();
        if pr.valid {
            prop_assert!(pr.uv[0] >= 0.0 && pr.uv[0] < 320.0 && pr.uv[1] >= 0.0 && pr.uv[1] < 240.0);
        }
        prop_assert!(pr.uv.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rotations_are_orthonormal(a in -3.2f64..3.2, b in -3.2f64..3.2, c in -3.2f64..3.2) {
        let m = mat_mul(&rot_z(a), &mat_mul(&rot_x(b), &rot_y(c)));
        prop_assert!((det3(&m) - 1.0).abs() < 1e-9);
        let mtm = mat_mul(&transpose(&m), &m);
        for i in 0..3 {
            for j in 0..3 {
                let id = if i == j { 1.0 } else { 0.0 };
                prop_assert!((mtm[i][j] - id).abs() < 1e-9);
            }
        }
        let w = [a / 3.0, b / 3.0, c / 3.0];
        prop_assert!((det3(&so3_exp(w)) - 1.0).abs() < 1e-9);
    }
}

#[test]
fn random_points_are_mostly_valid() {
    let mut r = rng(11);
    let rig = random_rig(&mut r, true, true);
    let n = (0..200).filter(|_| rig.project(visible_point(&mut r, &rig)).unwrap().valid).count();
    assert!(n > 150);
}

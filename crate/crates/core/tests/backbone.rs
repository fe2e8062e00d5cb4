mod common;

use common::{grad_err, rand_tensor, random_rig, rng, visible_point};
use fusepose::autograd::{Graph, ParamStore};
use fusepose::backbone::*;
use fusepose::geometry::Box2d;
use fusepose::gradcheck::rel_err;
use fusepose::pointops::{pad_shuffle, PointCloud};
use fusepose::tensor::Tensor;
use proptest::prelude::*;
use rand::Rng;

/// Textbook bilinear interpolation on one channel.
fn oracle_bilinear(plane: &[f64], h: usize, w: usize, u: f64, v: f64) -> f64 {
    if !(u >= 0.0 && v >= 0.0 && u <= (w - 1) as f64 && v <= (h - 1) as f64) {
        return 0.0;
    }
    let j0 = (u.floor() as usize).min(w - 2);
    let i0 = (v.floor() as usize).min(h - 2);
    let (a, b) = (u - j0 as f64, v - i0 as f64);
    let f = |i: usize, j: usize| plane[i * w + j];
    (1.0 - a) * (1.0 - b) * f(i0, j0) + a * (1.0 - b) * f(i0, j0 + 1) + (1.0 - a) * b * f(i0 + 1, j0) + a * b * f(i0 + 1, j0 + 1)
}

fn feature_map(seed: u64, c: usize, h: usize, w: usize) -> FeatureMap<f64> {
    FeatureMap { values: rand_tensor(&mut rng(seed), &[c, h, w], 1.0) }
}

#[test]
fn bilinear_on_grid_points_and_midpoints() {
    let f = feature_map(1, 3, 5, 7);
    let v = f.values.data();
    for i in 0..5 {
        for j in 0..7 {
            let got = bilinear_sample(&f, [j as f64, i as f64]);
            for c in 0..3 {
                assert_eq!(got[c], v[c * 35 + i * 7 + j]);
            }
        }
    }
    for i in 0..4 {
        for j in 0..6 {
            let got = bilinear_sample(&f, [j as f64 + 0.5, i as f64 + 0.5]);
            for c in 0..3 {
                let p = |a: usize, b: usize| v[c * 35 + a * 7 + b];
                let mean = (p(i, j) + p(i, j + 1) + p(i + 1, j) + p(i + 1, j + 1)) / 4.0;
                assert!((got[c] - mean).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn bilinear_matches_scalar_oracle_and_zero_outside() {
    let f = feature_map(2, 4, 9, 11);
    let mut r = rng(3);
    for _ in 0..1000 {
        let uv = [r.random_range(-2.0..12.0), r.random_range(-2.0..10.0)];
        let got = bilinear_sample(&f, uv);
        for c in 0..4 {
            let want = oracle_bilinear(&f.values.data()[c * 99..(c + 1) * 99], 9, 11, uv[0], uv[1]);
            assert!((got[c] - want).abs() < 1e-12, "{uv:?}");
        }
    }
}

#[test]
fn bilinear_gradients_match_finite_differences() {
    let f0 = rand_tensor(&mut rng(4), &[3, 6, 6], 1.0);
    let mut r = rng(5);
    let uv0 = Tensor::from_fn(&[10, 2], |_| r.random_range(0.2..4.8));
    let mask = vec![true; 10];
    let ew = grad_err(&uv0, 6, 1e-6, 1e-6, |g, uv| {
        let f = g.constant(f0.clone());
        g.bilinear(f, uv, &mask)
    });
    assert!(ew < 1e-4, "uv rel err {ew}");
    let ef = grad_err(&f0, 7, 1e-6, 1e-6, |g, f| {
        let uv = g.constant(uv0.clone());
        g.bilinear(f, uv, &mask)
    });
    assert!(ef < 1e-4, "feature rel err {ef}");
}

fn small_unet(seed: u64, cfg: UNetConfig) -> (UNet, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let unet = UNet::init(&cfg, &mut store, seed).unwrap();
    (unet, store)
}

#[test]
fn unet_shapes_and_zero_input() {
    let cfg = UNetConfig { in_channels: 4, encoder: vec![4, 8, 8, 8], decoder: vec![8, 8, 8, 4], out_channels: 6 };
    let (unet, store) = small_unet(0, cfg);
    let crop = ImageCrop { input: Tensor::zeros(&[4, 16, 16]) };
    let f = unet_forward(&unet, &store, &crop).unwrap();
    assert_eq!(f.values.shape(), &[6, 16, 16]);
    assert!(f.values.is_finite());

    let bad = ImageCrop { input: Tensor::zeros(&[4, 12, 12]) };
    assert!(matches!(unet_forward(&unet, &store, &bad), Err(BackboneError::Shape(_))));
    let bad = ImageCrop { input: Tensor::zeros(&[3, 16, 16]) };
    assert!(matches!(unet_forward(&unet, &store, &bad), Err(BackboneError::Shape(_))));
}

#[test]
fn unet_default_architecture_contract() {
    let cfg = UNetConfig::default();
    assert_eq!(cfg.encoder, vec![32, 64, 128, 256]);
    assert_eq!(cfg.decoder, vec![256, 128, 64, 32]);
    assert_eq!(cfg.out_channels, 32);
    assert_eq!(cfg.size_multiple(), 8);
    assert!(128 % cfg.size_multiple() == 0);
}

#[test]
fn unet_parameter_gradients_match_finite_differences() {
    let cfg = UNetConfig { in_channels: 4, encoder: vec![8, 8], decoder: vec![8, 8], out_channels: 3 };
    let (unet, store) = small_unet(11, cfg);
    let x = rand_tensor(&mut rng(12), &[4, 8, 8], 1.0);
    let probe = rand_tensor(&mut rng(13), &[3, 8, 8], 1.0);
    let objective = |store: &ParamStore<f64>| {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = unet.forward(&mut g, store, xv).unwrap();
        let w = g.constant(probe.clone());
        let p = g.mul(y, w);
        let s = g.sum(p);
        (g, s)
    };
    let (g, s) = objective(&store);
    let mut analytic = store.zeros_like();
    g.backward(s).accumulate_params(&g, &mut analytic);

    let kinds = [".w", ".b", ".gn_gamma", ".gn_beta"];
    let mut r = rng(14);
    for kind in kinds {
        let ids: Vec<_> = store.ids().filter(|&id| store.name(id).ends_with(kind)).collect();
        let mut worst: f64 = 0.0;
        for _ in 0..50 {
            let id = ids[r.random_range(0..ids.len())];
            let k = r.random_range(0..store.get(id).len());
            let h = 1e-5;
            let mut plus = store.clone();
            plus.get_mut(id).data_mut()[k] += h;
            let mut minus = store.clone();
            minus.get_mut(id).data_mut()[k] -= h;
            let fp = { let (g, s) = objective(&plus); g.value(s).data()[0] };
            let fm = { let (g, s) = objective(&minus); g.value(s).data()[0] };
            let num = (fp - fm) / (2.0 * h);
            worst = worst.max(rel_err(analytic[id.0].data()[k], num, 1e-6));
        }
        assert!(worst < 1e-3, "{kind}: rel err {worst}");
    }
}

fn argmax_response(unet: &UNet, store: &ParamStore<f64>, row: usize, col: usize, s: usize) -> (usize, usize) {
    let mut input = Tensor::zeros(&[4, s, s]);
    for c in 0..3 {
        for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            input.data_mut()[c * s * s + (row + di) * s + col + dj] = 1.0;
        }
    }
    let f = unet_forward(unet, store, &ImageCrop { input }).unwrap();
    let base = unet_forward(unet, store, &ImageCrop { input: Tensor::zeros(&[4, s, s]) }).unwrap();
    let ch = f.channels();
    let mut best = (0.0, (0, 0));
    for i in 0..s {
        for j in 0..s {
            let e: f64 = (0..ch).map(|c| (f.values.data()[c * s * s + i * s + j] - base.values.data()[c * s * s + i * s + j]).powi(2)).sum();
            if e > best.0 {
                best = (e, (i, j));
            }
        }
    }
    best.1
}

#[test]
fn bright_dot_response_follows_translation() {
    let cfg = UNetConfig { in_channels: 4, encoder: vec![8, 8, 8], decoder: vec![8, 8, 8], out_channels: 8 };
    let s = 48;
    for seed in 0..3 {
        let (unet, store) = small_unet(seed, cfg.clone());
        let a = argmax_response(&unet, &store, 16, 18, s);
        let b = argmax_response(&unet, &store, 24, 26, s);
        let di = b.0 as i64 - a.0 as i64;
        let dj = b.1 as i64 - a.1 as i64;
        assert!((di - 8).abs() <= 1 && (dj - 8).abs() <= 1, "seed {seed}: {a:?} -> {b:?}");
    }
}

#[test]
fn crop_window_round_trips() {
    let win = CropWindow::around(&Box2d { x: 40.0, y: 10.0, w: 30.0, h: 60.0 }, 32);
    assert!((win.scale - 32.0 / 72.0).abs() < 1e-12);
    let p: [f64; 2] = [55.3, 41.7];
    let q = win.to_frame(win.to_crop(p));
    assert!((q[0] - p[0]).abs() < 1e-12 && (q[1] - p[1]).abs() < 1e-12);
}

fn align_fixture(seed: u64) -> (FeatureMap<f64>, fusepose::pointops::PaddedCloud<f64>, fusepose::geometry::CameraRig<f64>, CropWindow) {
    let mut r = rng(seed);
    let cam = random_rig(&mut r, true, true);
    let pts: Vec<[f64; 3]> = (0..20).map(|_| visible_point(&mut r, &cam)).collect();
    let padded = pad_shuffle(&PointCloud::new(pts), 32, seed);
    let win = CropWindow::around(&Box2d { x: 60.0, y: 40.0, w: 200.0, h: 160.0 }, 16);
    (feature_map(seed + 1, 5, 16, 16), padded, cam, win)
}

#[test]
fn pixel_align_equals_loop_composition() {
    for seed in 0..20 {
        let (f, padded, cam, win) = align_fixture(seed);
        let out = pixel_align(&f, &padded, &cam, &win);
        assert_eq!(out.shape(), &[32, 5]);
        for i in 0..32 {
            let want = if padded.mask[i] {
                match cam.project(padded.points[i]) {
                    Ok(p) if p.valid => bilinear_sample(&f, win.to_crop(p.uv)),
                    _ => vec![0.0; 5],
                }
            } else {
                vec![0.0; 5]
            };
            assert_eq!(out.row(i), &want[..]);
        }
    }
}

#[test]
fn pixel_align_all_masked_is_zero() {
    let (f, mut padded, cam, win) = align_fixture(3);
    padded.mask.iter_mut().for_each(|m| *m = false);
    padded.points.iter_mut().for_each(|p| *p = [0.0; 3]);
    assert!(pixel_align(&f, &padded, &cam, &win).data().iter().all(|&x| x == 0.0));
}

#[test]
fn pixel_align_single_point() {
    let (f, _, cam, win) = align_fixture(4);
    let mut r = rng(40);
    let p = visible_point(&mut r, &cam);
    let padded = pad_shuffle(&PointCloud::new(vec![p]), 4, 0);
    let out = pixel_align(&f, &padded, &cam, &win);
    let slot = padded.mask.iter().position(|&m| m).unwrap();
    let direct = bilinear_sample(&f, win.to_crop(cam.project(p).unwrap().uv));
    assert_eq!(out.row(slot), &direct[..]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn masked_rows_are_zero_for_any_params(seed in 0u64..10_000) {
        let (_, padded, cam, win) = align_fixture(seed % 50);
        let f = feature_map(seed, 5, 16, 16);
        let out = pixel_align(&f, &padded, &cam, &win);
        for (i, &m) in padded.mask.iter().enumerate() {
            if !m {
                prop_assert!(out.row(i).iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn bilinear_is_convex_blend(u in -1.0f64..8.0, v in -1.0f64..8.0, seed in 0u64..1000) {
        let f = feature_map(seed, 1, 7, 7);
        let got = bilinear_sample(&f, [u, v])[0];
        let (lo, hi) = f.values.data().iter().fold((0.0f64, 0.0f64), |(a, b), &x| (a.min(x), b.max(x)));
        prop_assert!(got >= lo - 1e-12 && got <= hi + 1e-12);
    }
}

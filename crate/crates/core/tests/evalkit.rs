mod common;

use common::{rng, tiny_config};
use fusepose::evalkit::*;
use fusepose::fusion::{prepare_all, PreparedSample};
use fusepose::geometry::{mat_mul, mat_vec, rot_x, rot_y, rot_z};
use fusepose::synthdata::{generate_dataset, SynthConfig};
use fusepose::training::ExperimentConfig;
use proptest::prelude::*;
use rand::Rng;

type Set3 = (Vec<Vec<[f64; 3]>>, Vec<Vec<[f64; 3]>>, Vec<Vec<bool>>);

fn random_set(seed: u64, n: usize, nj: usize) -> Set3 {
    let mut r = rng(seed);
    let mut preds = Vec::new();
    let mut gts: Vec<Vec<[f64; 3]>> = Vec::new();
    let mut vis: Vec<Vec<bool>> = Vec::new();
    for _ in 0..n {
        let g: Vec<[f64; 3]> = (0..nj).map(|_| [r.random_range(-5.0..5.0), r.random_range(-5.0..5.0), r.random_range(0.0..2.0)]).collect();
        preds.push(g.iter().map(|p| p.map(|x| x + r.random_range(-0.3..0.3))).collect());
        gts.push(g);
        vis.push((0..nj).map(|_| r.random::<f64>() < 0.7).collect());
    }
    vis[0][0] = true;
    (preds, gts, vis)
}

fn loop_oracle<const K: usize>(p: &[Vec<[f64; K]>], g: &[Vec<[f64; K]>], v: &[Vec<bool>]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..p.len() {
        for j in 0..p[i].len() {
            let w = if v[i][j] { 1.0 } else { 0.0 };
            let mut d2 = 0.0;
            for k in 0..K {
                d2 += (p[i][j][k] - g[i][j][k]) * (p[i][j][k] - g[i][j][k]);
            }
            num += w * d2.sqrt();
            den += w;
        }
    }
    num / den
}

#[test]
fn mpjpe_basic_cases() {
    let (_, g, v) = random_set(1, 4, 14);
    assert_eq!(mpjpe(&g, &g, &v).unwrap(), 0.0);
    let p = vec![vec![[0.03, 0.04, 0.0], [9.0, 9.0, 9.0]]];
    let g = vec![vec![[0.0; 3], [0.0; 3]]];
    let v = vec![vec![true, false]];
    assert!((mpjpe(&p, &g, &v).unwrap() - 5.0).abs() < 1e-12);
    let none = vec![vec![false, false]];
    assert!(matches!(mpjpe(&p, &g, &none), Err(EvalError::NoVisibleJoints)));
    assert!(matches!(mpjpe(&p, &g, &[]), Err(EvalError::Shape(_))));
}

#[test]
fn mpjpe2d_basic_cases() {
    let p = vec![vec![[13.0, 24.0], [1.0, 1.0]]];
    let g = vec![vec![[10.0, 20.0], [100.0, 100.0]]];
    let v = vec![vec![true, false]];
    assert_eq!(mpjpe2d(&g, &g, &v).unwrap(), 0.0);
    assert!((mpjpe2d(&p, &g, &v).unwrap() - 5.0).abs() < 1e-12);
    assert!(matches!(mpjpe2d(&p, &g, &[vec![false, false]]), Err(EvalError::NoVisibleJoints)));
}

#[test]
fn metrics_match_loop_oracle() {
    for seed in 0..1000 {
        let (p, g, v) = random_set(seed, 1 + seed as usize % 7, 14);
        let got = mpjpe(&p, &g, &v).unwrap();
        assert!((got - 100.0 * loop_oracle(&p, &g, &v)).abs() < 1e-10, "seed {seed}");
        let p2: Vec<Vec<[f64; 2]>> = p.iter().map(|s| s.iter().map(|q| [q[0] * 100.0, q[1] * 100.0]).collect()).collect();
        let g2: Vec<Vec<[f64; 2]>> = g.iter().map(|s| s.iter().map(|q| [q[0] * 100.0, q[1] * 100.0]).collect()).collect();
        assert!((mpjpe2d(&p2, &g2, &v).unwrap() - loop_oracle(&p2, &g2, &v)).abs() < 1e-10, "seed {seed}");
    }
}

fn sample_errors(seed: u64, n: usize) -> Vec<SampleError> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let visible = r.random_range(0..=14);
            SampleError { distance: r.random_range(3.0..40.0), visible, error_sum: visible as f64 * r.random_range(1.0..30.0) }
        })
        .collect()
}

#[test]
fn distance_bins_are_equal_population_partitions() {
    for seed in 0..50 {
        let rs = sample_errors(seed, 50 + seed as usize * 7);
        let counted: Vec<&SampleError> = rs.iter().filter(|r| r.visible > 0).collect();
        let bins = bin_by_distance(&rs, 20).unwrap();
        assert_eq!(bins.len(), 20);
        let sizes: Vec<usize> = bins.iter().map(|b| b.samples).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        assert_eq!(sizes.iter().sum::<usize>(), counted.len());
        // Oracle: sort, cut, and pool each chunk.
        let mut sorted = counted.clone();
        sorted.sort_by(|a, b| a.distance.partial_cmp(&b.distance).unwrap());
        let mut at = 0;
        for b in &bins {
            let chunk = &sorted[at..at + b.samples];
            at += b.samples;
            let mean_d = chunk.iter().map(|s| s.distance).sum::<f64>() / chunk.len() as f64;
            let pooled = chunk.iter().map(|s| s.error_sum).sum::<f64>() / chunk.iter().map(|s| s.visible).sum::<usize>() as f64;
            assert!((b.center - mean_d).abs() < 1e-10);
            assert!((b.mpjpe - pooled).abs() < 1e-10);
        }
        for w in bins.windows(2) {
            assert!(w[0].center <= w[1].center);
        }
    }
}

#[test]
fn distance_bin_edge_cases() {
    let same: Vec<SampleError> = (0..40).map(|i| SampleError { distance: 12.5, visible: 3, error_sum: 3.0 * (i % 5) as f64 }).collect();
    let bins = bin_by_distance(&same, 20).unwrap();
    assert!(bins.iter().all(|b| b.center == 12.5));

    let flat: Vec<SampleError> = (0..100).map(|i| SampleError { distance: 5.0 + 0.3 * i as f64, visible: 7, error_sum: 7.0 * 4.2 }).collect();
    let bins = bin_by_distance(&flat, 20).unwrap();
    assert!(bins.iter().all(|b| (b.mpjpe - 4.2).abs() < 1e-12 && b.samples == 5));

    assert!(matches!(bin_by_distance(&flat[..19], 20), Err(EvalError::TooFewSamples { samples: 19, bins: 20 })));
    assert!(matches!(bin_by_distance(&flat, 0), Err(EvalError::TooFewSamples { .. })));
    // 23 samples in 20 bins: first three bins take the remainder.
    let sizes: Vec<usize> = bin_by_distance(&flat[..23], 20).unwrap().iter().map(|b| b.samples).collect();
    assert_eq!(&sizes[..4], &[2, 2, 2, 1]);
}

#[test]
fn visibility_bins_match_oracle() {
    let single: Vec<SampleError> = (0..5).map(|_| SampleError { distance: 10.0, visible: 4, error_sum: 8.0 }).collect();
    let bins = bin_by_visibility(&single);
    assert_eq!(bins, vec![Bin { center: 4.0, mpjpe: 2.0, samples: 5 }]);
    assert!(bin_by_visibility(&[]).is_empty());

    for seed in 0..30 {
        let rs = sample_errors(seed, 200);
        let bins = bin_by_visibility(&rs);
        let mut expected = Vec::new();
        for k in 1..=14usize {
            let (mut e, mut v, mut c) = (0.0, 0usize, 0usize);
            for r in &rs {
                if r.visible == k {
                    e += r.error_sum;
                    v += r.visible;
                    c += 1;
                }
            }
            if c > 0 {
                expected.push((k as f64, e / v as f64, c));
            }
        }
        assert_eq!(bins.len(), expected.len());
        for (b, (k, m, c)) in bins.iter().zip(expected) {
            assert_eq!(b.center, k);
            assert_eq!(b.samples, c);
            assert!((b.mpjpe - m).abs() < 1e-10);
        }
    }
}

#[test]
fn spearman_cases() {
    let x = [1.0, 2.0, 3.0, 4.0, 5.0];
    assert!((spearman(&x, &[2.0, 4.0, 8.0, 16.0, 32.0]) - 1.0).abs() < 1e-12);
    assert!((spearman(&x, &[5.0, 4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    assert!(spearman(&x, &[1.0; 5]).is_nan());
    // Ties get average ranks: y ranks (1.5, 1.5, 3, 4, 5).
    let y = [1.0, 1.0, 2.0, 3.0, 4.0];
    let ry = [1.5, 1.5, 3.0, 4.0, 5.0];
    let m = 3.0;
    let cov: f64 = (0..5).map(|i| (x[i] - m) * (ry[i] - m)).sum();
    let sx: f64 = (0..5).map(|i| (x[i] - m).powi(2)).sum::<f64>().sqrt();
    let sy: f64 = (0..5).map(|i| (ry[i] - m).powi(2)).sum::<f64>().sqrt();
    assert!((spearman(&x, &y) - cov / (sx * sy)).abs() < 1e-12);
}

#[test]
fn toggles_parse_and_apply() {
    let base = ExperimentConfig::default();
    let c = Toggle::LambdaZero.apply(&base);
    assert_eq!(c.loss.lambda, 0.0);
    assert_eq!(c.model, base.model);
    assert!(!Toggle::NoRgb.apply(&base).model.use_rgb);
    assert!(!Toggle::NoDepth.apply(&base).model.use_depth);
    assert!(!Toggle::NoRff.apply(&base).model.use_rff);
    for t in Toggle::ALL {
        assert_eq!(Toggle::parse(t.name()), Some(t));
    }
    assert_eq!(Toggle::parse("NoRgb"), Some(Toggle::NoRgb));
    assert_eq!(Toggle::parse("bogus"), None);
}

#[test]
fn ablation_row_stats_and_csv() {
    let row = AblationRow { name: "full".into(), per_seed: vec![2.0, 4.0, 6.0] };
    assert_eq!(row.mean(), 4.0);
    assert_eq!(row.std(), 2.0);
    assert_eq!(AblationRow { name: "x".into(), per_seed: vec![3.0] }.std(), 0.0);
    let csv = ablation_csv(&[row]);
    assert_eq!(csv, "config,mean_mpjpe3d_cm,std_cm,per_seed_cm\nfull,4.0000,2.0000,2.0000;4.0000;6.0000\n");
    let g = SweepGrid { lambdas: vec![0.0, 0.1], fractions: vec![0.5], values: vec![vec![3.0], vec![2.5]] };
    assert_eq!(sweep_csv(&g), "lambda,fraction3d,val_mpjpe3d_cm\n0,0.5,3.0000\n0.1,0.5,2.5000\n");
    assert_eq!((g.min(), g.max()), (2.5, 3.0));
    assert!(sweep_svg(&g).starts_with("<svg"));
    let bins = [Bin { center: 5.0, mpjpe: 1.5, samples: 3 }];
    assert_eq!(curve_csv(&bins, "distance_m"), "distance_m,mpjpe3d_cm,samples\n5.0000,1.5000,3\n");
    assert!(curve_svg(&bins, "distance").contains("polyline"));
}

fn tiny_data(n: usize, seed: u64, fraction3d: f64) -> Vec<PreparedSample<f32>> {
    let file = generate_dataset(&SynthConfig { n_samples: n, fraction_with_3d: fraction3d, seed, ..Default::default() }).unwrap();
    prepare_all(&file.samples, &tiny_config()).unwrap()
}

fn tiny_experiment() -> ExperimentConfig {
    let mut cfg = ExperimentConfig { model: tiny_config(), ..Default::default() };
    cfg.train.epochs = 2;
    cfg.train.batch_size = 4;
    cfg.train.steps_per_epoch = Some(2);
    cfg.train.lr = 1e-3;
    cfg
}

#[test]
fn empty_toggle_set_gives_single_full_row() {
    let train = tiny_data(12, 3, 0.5);
    let val = tiny_data(4, 4, 1.0);
    let cfg = tiny_experiment();
    let rows = run_ablation(&train, &val, &cfg, &[], &[7]).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].name, "full");
    assert_eq!(rows[0].per_seed, vec![train_and_score(&train, &val, &cfg, 7).unwrap()]);
    let rows = run_ablation(&train, &val, &cfg, &[Toggle::LambdaZero], &[7, 8]).unwrap();
    assert_eq!(rows.iter().map(|r| r.name.as_str()).collect::<Vec<_>>(), ["full", "lambda=0"]);
    assert_eq!(rows[1].per_seed.len(), 2);
}

#[test]
fn sweep_cells_are_independent() {
    let train = tiny_data(12, 5, 0.5);
    let val = tiny_data(4, 6, 1.0);
    let cfg = tiny_experiment();
    let one = sweep(&train, &val, &cfg, &[0.01], &[0.5], 9).unwrap();
    let direct = sweep_cell(&train, &val, &cfg, 0.01, 0.5, cell_seed(9, 0, 0)).unwrap();
    assert_eq!(one.values, vec![vec![direct]]);
    let mut c = cfg.clone();
    c.loss.lambda = 0.01;
    c.train.fraction3d = 0.5;
    assert_eq!(direct, train_and_score(&train, &val, &c, cell_seed(9, 0, 0)).unwrap());

    let grid = sweep(&train, &val, &cfg, &[0.0, 0.05], &[0.25, 0.75], 9).unwrap();
    // Cells evaluated in reverse order match the grid.
    for i in (0..2).rev() {
        for j in (0..2).rev() {
            let v = sweep_cell(&train, &val, &cfg, grid.lambdas[i], grid.fractions[j], cell_seed(9, i, j)).unwrap();
            assert_eq!(v, grid.values[i][j]);
        }
    }
    assert!(matches!(sweep(&train, &val, &cfg, &[], &[0.5], 9), Err(EvalError::EmptyGrid)));
}

#[test]
fn score_counts_visible_joints() {
    let file = generate_dataset(&SynthConfig { n_samples: 30, fraction_with_3d: 1.0, seed: 11, ..Default::default() }).unwrap();
    let targets: Vec<EvalTarget> = file.samples.iter().map(EvalTarget::of_sample).collect();
    let preds: Vec<Vec<[f64; 3]>> = targets.iter().map(|t| t.labels3d.clone().unwrap()).collect();
    let ev = score(&targets, preds).unwrap();
    let vis: usize = targets.iter().map(|t| t.visibility.iter().filter(|&&v| v).count()).sum();
    assert_eq!(ev.report.n_joints_counted, vis);
    assert_eq!(ev.report.mpjpe3d, Some(0.0));
    assert!(ev.report.mpjpe2d.unwrap() < 1e-6);
    assert_eq!(ev.report.distance_curve.len(), DISTANCE_BINS);
    assert!(matches!(score(&targets, vec![]), Err(EvalError::Shape(_))));
}

proptest! {
    #[test]
    fn mpjpe_rigid_invariance(seed in 0u64..10_000, a in -3.0f64..3.0, b in -3.0f64..3.0, c in -3.0f64..3.0, t in prop::array::uniform3(-50.0f64..50.0)) {
        let (p, g, v) = random_set(seed, 3, 14);
        let rot = mat_mul(&rot_x(a), &mat_mul(&rot_y(b), &rot_z(c)));
        let tf = |s: &Vec<Vec<[f64; 3]>>| -> Vec<Vec<[f64; 3]>> {
            s.iter().map(|js| js.iter().map(|q| { let r = mat_vec(&rot, q); [r[0] + t[0], r[1] + t[1], r[2] + t[2]] }).collect()).collect()
        };
        let before = mpjpe(&p, &g, &v).unwrap();
        let after = mpjpe(&tf(&p), &tf(&g), &v).unwrap();
        prop_assert!((before - after).abs() < 1e-9);
    }

    #[test]
    fn mpjpe_concatenation_is_weighted(s1 in 0u64..10_000, s2 in 0u64..10_000, n1 in 1usize..6, n2 in 1usize..6) {
        let (p1, g1, v1) = random_set(s1, n1, 14);
        let (p2, g2, v2) = random_set(s2.wrapping_add(1 << 40), n2, 14);
        let w1 = v1.iter().flatten().filter(|&&x| x).count() as f64;
        let w2 = v2.iter().flatten().filter(|&&x| x).count() as f64;
        let m1 = mpjpe(&p1, &g1, &v1).unwrap();
        let m2 = mpjpe(&p2, &g2, &v2).unwrap();
        let cat = |a: &[Vec<[f64; 3]>], b: &[Vec<[f64; 3]>]| [a, b].concat();
        let m = mpjpe(&cat(&p1, &p2), &cat(&g1, &g2), &[v1.clone(), v2.clone()].concat()).unwrap();
        prop_assert!((m - (w1 * m1 + w2 * m2) / (w1 + w2)).abs() < 1e-9);
    }

    #[test]
    fn distance_binning_partitions(seed in 0u64..10_000, n in 20usize..300, k in 1usize..20) {
        let rs = sample_errors(seed, n);
        let counted = rs.iter().filter(|r| r.visible > 0).count();
        prop_assume!(counted >= k);
        let bins = bin_by_distance(&rs, k).unwrap();
        prop_assert_eq!(bins.iter().map(|b| b.samples).sum::<usize>(), counted);
        prop_assert!(bins.iter().all(|b| b.samples >= counted / k && b.samples <= counted / k + 1));
        let vis_total: usize = bin_by_visibility(&rs).iter().map(|b| b.samples).sum();
        prop_assert_eq!(vis_total, counted);
    }
}

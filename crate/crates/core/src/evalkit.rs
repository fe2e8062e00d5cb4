//! Visibility-masked MPJPE, distance and visibility binning, ablations and
//! the λ × 3D-fraction sweep.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::{ModelError, PoseModel, PreparedSample};
use crate::geometry::CameraRig;
use crate::synthdata::Sample;
use crate::scalar::Scalar;
use crate::training::{train, ExperimentConfig, TrainError, TrainOutputs};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no visible joints: the metric is undefined")]
    NoVisibleJoints,
    #[error("need at least {bins} samples for {bins} bins, got {samples}")]
    TooFewSamples { samples: usize, bins: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty grid")]
    EmptyGrid,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] Box<TrainError>),
}

impl From<TrainError> for EvalError {
    fn from(e: TrainError) -> Self {
        EvalError::Train(Box::new(e))
    }
}

fn masked_mean<const K: usize>(preds: &[Vec<[f64; K]>], gts: &[Vec<[f64; K]>], vis: &[Vec<bool>]) -> Result<(f64, usize), EvalError> {
    if preds.len() != gts.len() || preds.len() != vis.len() {
        return Err(EvalError::Shape("preds, gts and vis must list the same samples".into()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((p, g), v) in preds.iter().zip(gts).zip(vis) {
        if p.len() != g.len() || p.len() != v.len() {
            return Err(EvalError::Shape("joint counts differ within a sample".into()));
        }
        for ((a, b), &m) in p.iter().zip(g).zip(v) {
            if m {
                sum += (0..K).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>().sqrt();
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(EvalError::NoVisibleJoints);
    }
    Ok((sum / n as f64, n))
}

/// Mean Euclidean error over visible joints, in centimetres (inputs in metres).
pub fn mpjpe(preds: &[Vec<[f64; 3]>], gts: &[Vec<[f64; 3]>], vis: &[Vec<bool>]) -> Result<f64, EvalError> {
    masked_mean(preds, gts, vis).map(|(m, _)| 100.0 * m)
}

/// Mean pixel error over visible joints.
pub fn mpjpe2d(preds: &[Vec<[f64; 2]>], gts: &[Vec<[f64; 2]>], vis: &[Vec<bool>]) -> Result<f64, EvalError> {
    masked_mean(preds, gts, vis).map(|(m, _)| m)
}

/// Per-sample 3D error summary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleError {
    pub distance: f64,
    /// Visible joints in the sample.
    pub visible: usize,
    /// Sum of visible-joint errors (cm).
    pub error_sum: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    /// Mean distance (distance bins) or visible-joint count.
    pub center: f64,
    pub mpjpe: f64,
    pub samples: usize,
}

fn pooled(rs: &[&SampleError]) -> f64 {
    let n: usize = rs.iter().map(|r| r.visible).sum();
    rs.iter().map(|r| r.error_sum).sum::<f64>() / n as f64
}

/// Equal-population bins over distance (sizes differ by at most one, the
/// first bins take the remainder). Samples without visible joints are left
/// out.
pub fn bin_by_distance(results: &[SampleError], n_bins: usize) -> Result<Vec<Bin>, EvalError> {
    let mut rs: Vec<&SampleError> = results.iter().filter(|r| r.visible > 0).collect();
    if n_bins == 0 || rs.len() < n_bins {
        return Err(EvalError::TooFewSamples { samples: rs.len(), bins: n_bins });
    }
    rs.sort_by(|a, b| a.distance.total_cmp(&b.distance));
    let (q, r) = (rs.len() / n_bins, rs.len() % n_bins);
    let mut bins = Vec::with_capacity(n_bins);
    let mut start = 0;
    for b in 0..n_bins {
        let len = q + usize::from(b < r);
        let chunk = &rs[start..start + len];
        start += len;
        bins.push(Bin { center: chunk.iter().map(|s| s.distance).sum::<f64>() / len as f64, mpjpe: pooled(chunk), samples: len });
    }
    Ok(bins)
}

/// One bin per observed visible-joint count, ascending.
pub fn bin_by_visibility(results: &[SampleError]) -> Vec<Bin> {
    let max = results.iter().map(|r| r.visible).max().unwrap_or(0);
    (1..=max)
        .filter_map(|k| {
            let group: Vec<&SampleError> = results.iter().filter(|r| r.visible == k).collect();
            (!group.is_empty()).then(|| Bin { center: k as f64, mpjpe: pooled(&group), samples: group.len() })
        })
        .collect()
}

/// Pooled MPJPE (cm) over samples selected by `keep`; `None` without visible joints.
pub fn pooled_mpjpe(results: &[SampleError], keep: impl Fn(&SampleError) -> bool) -> Option<f64> {
    let sel: Vec<&SampleError> = results.iter().filter(|r| keep(r) && r.visible > 0).collect();
    (!sel.is_empty()).then(|| pooled(&sel))
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties; NaN when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum::<f64>().sqrt();
    let sy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum::<f64>().sqrt();
    cov / (sx * sy)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// cm
    pub mpjpe3d: Option<f64>,
    /// px
    pub mpjpe2d: Option<f64>,
    pub n_joints_counted: usize,
    pub n_joints_counted_2d: usize,
    pub distance_curve: Vec<Bin>,
    pub visibility_curve: Vec<Bin>,
}

pub struct Evaluation {
    pub report: MetricsReport,
    /// Per-sample errors of the samples with 3D labels.
    pub samples: Vec<SampleError>,
    /// World-frame predictions for every input sample.
    pub predictions: Vec<Vec<[f64; 3]>>,
}

/// Distance bins used in reports.
pub const DISTANCE_BINS: usize = 20;

/// What scoring needs from a labelled sample.
#[derive(Clone, Debug)]
pub struct EvalTarget {
    pub distance: f64,
    pub labels3d: Option<Vec<[f64; 3]>>,
    pub labels2d: Option<Vec<[f64; 2]>>,
    pub visibility: Vec<bool>,
    pub cam: CameraRig<f64>,
}

impl EvalTarget {
    pub fn of_sample(s: &Sample) -> Self {
        Self { distance: s.distance(), labels3d: s.labels3d.clone(), labels2d: s.labels2d.clone(), visibility: s.visibility.clone(), cam: s.cam.clone() }
    }

    pub fn of_prepared<T: Scalar>(p: &PreparedSample<T>) -> Self {
        let f = |x: T| x.to_f64_lossy();
        Self {
            distance: p.distance,
            labels3d: p.labels3d.as_ref().map(|l| l.iter().map(|q| q.map(f)).collect()),
            labels2d: p.labels2d.as_ref().map(|l| l.iter().map(|q| q.map(f)).collect()),
            visibility: p.visibility.clone(),
            cam: p.cam.cast(),
        }
    }
}

/// Scores world-frame predictions: 3D joints against 3D labels, projected
/// joints against 2D labels. Distance bins are filled when there are enough
/// 3D-labelled samples.
pub fn score(targets: &[EvalTarget], preds: Vec<Vec<[f64; 3]>>) -> Result<Evaluation, EvalError> {
    if targets.len() != preds.len() {
        return Err(EvalError::Shape(format!("{} predictions for {} samples", preds.len(), targets.len())));
    }
    let mut samples = Vec::new();
    let (mut s3, mut n3, mut s2, mut n2) = (0.0, 0usize, 0.0, 0usize);
    for (t, pred) in targets.iter().zip(&preds) {
        if pred.len() != t.visibility.len() {
            return Err(EvalError::Shape(format!("{} predicted joints, {} labelled", pred.len(), t.visibility.len())));
        }
        if let Some(gt) = &t.labels3d {
            let mut e = SampleError { distance: t.distance, visible: 0, error_sum: 0.0 };
            for ((a, b), &v) in pred.iter().zip(gt).zip(&t.visibility) {
                if v {
                    e.error_sum += 100.0 * (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>().sqrt();
                    e.visible += 1;
                }
            }
            s3 += e.error_sum;
            n3 += e.visible;
            samples.push(e);
        }
        if let Some(gt) = &t.labels2d {
            for ((a, b), &v) in pred.iter().zip(gt).zip(&t.visibility) {
                if !v {
                    continue;
                }
                if let Ok(pr) = t.cam.project(*a) {
                    if pr.uv[0].is_finite() && pr.uv[1].is_finite() {
                        s2 += (0..2).map(|k| (pr.uv[k] - b[k]).powi(2)).sum::<f64>().sqrt();
                        n2 += 1;
                    }
                }
            }
        }
    }
    let report = MetricsReport {
        mpjpe3d: (n3 > 0).then(|| s3 / n3 as f64),
        mpjpe2d: (n2 > 0).then(|| s2 / n2 as f64),
        n_joints_counted: n3,
        n_joints_counted_2d: n2,
        distance_curve: bin_by_distance(&samples, DISTANCE_BINS).unwrap_or_default(),
        visibility_curve: bin_by_visibility(&samples),
    };
    Ok(Evaluation { report, samples, predictions: preds })
}

/// Predicts every sample with `model` and scores the predictions.
pub fn evaluate<T: Scalar>(model: &PoseModel<T>, data: &[PreparedSample<T>]) -> Result<Evaluation, ModelError> {
    let preds: Vec<Vec<[T; 3]>> = data.par_iter().map(|p| model.predict(p)).collect::<Result<_, _>>()?;
    let preds = preds.into_iter().map(|v| v.into_iter().map(|p| p.map(|x| x.to_f64_lossy())).collect()).collect();
    let targets: Vec<EvalTarget> = data.iter().map(EvalTarget::of_prepared).collect();
    score(&targets, preds).map_err(|e| ModelError::Shape(e.to_string()))
}

/// Architectural toggles of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Toggle {
    /// λ = 0: no 2D supervision.
    LambdaZero,
    NoRgb,
    NoDepth,
    NoRff,
}

impl Toggle {
    pub const ALL: [Toggle; 4] = [Toggle::LambdaZero, Toggle::NoRgb, Toggle::NoDepth, Toggle::NoRff];

    pub fn name(self) -> &'static str {
        match self {
            Toggle::LambdaZero => "lambda=0",
            Toggle::NoRgb => "no-rgb",
            Toggle::NoDepth => "no-depth",
            Toggle::NoRff => "no-rff",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s || format!("{t:?}").eq_ignore_ascii_case(s))
    }

    pub fn apply(self, cfg: &ExperimentConfig) -> ExperimentConfig {
        let mut c = cfg.clone();
        match self {
            Toggle::LambdaZero => c.loss.lambda = 0.0,
            Toggle::NoRgb => c.model.use_rgb = false,
            Toggle::NoDepth => c.model.use_depth = false,
            Toggle::NoRff => c.model.use_rff = false,
        }
        c
    }
}

/// One trained configuration: validation MPJPE (cm) per seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub per_seed: Vec<f64>,
}

impl AblationRow {
    pub fn mean(&self) -> f64 {
        self.per_seed.iter().sum::<f64>() / self.per_seed.len() as f64
    }

    /// Sample standard deviation over seeds (0 for a single seed).
    pub fn std(&self) -> f64 {
        let n = self.per_seed.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean();
        (self.per_seed.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    }
}

/// Trains and scores one configuration for one seed: the model seed and the
/// batch seed both come from `seed`.
pub fn train_and_score<T: Scalar>(train_set: &[PreparedSample<T>], val: &[PreparedSample<T>], cfg: &ExperimentConfig, seed: u64) -> Result<f64, EvalError> {
    let mut c = cfg.clone();
    c.train.seed = seed;
    let r = train(train_set, &[], &c, seed, &TrainOutputs::default())?;
    let ev = evaluate(&r.model, val)?;
    ev.report.mpjpe3d.ok_or(EvalError::NoVisibleJoints)
}

/// `full` row followed by one row per toggle, each trained from the same
/// seeds. Inputs must already be prepared for every model variant (the
/// preprocessing does not depend on the toggles).
pub fn run_ablation<T: Scalar>(
    train_set: &[PreparedSample<T>],
    val: &[PreparedSample<T>],
    base: &ExperimentConfig,
    toggles: &[Toggle],
    seeds: &[u64],
) -> Result<Vec<AblationRow>, EvalError> {
    let mut configs = vec![("full".to_string(), base.clone())];
    configs.extend(toggles.iter().map(|t| (t.name().to_string(), t.apply(base))));
    configs
        .into_iter()
        .map(|(name, cfg)| {
            let per_seed = seeds.iter().map(|&s| train_and_score(train_set, val, &cfg, s)).collect::<Result<Vec<_>, _>>()?;
            Ok(AblationRow { name, per_seed })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("config,mean_mpjpe3d_cm,std_cm,per_seed_cm\n");
    for r in rows {
        let seeds: Vec<String> = r.per_seed.iter().map(|x| format!("{x:.4}")).collect();
        let _ = writeln!(s, "{},{:.4},{:.4},{}", r.name, r.mean(), r.std(), seeds.join(";"));
    }
    s
}

/// Validation MPJPE over a λ × 3D-fraction grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub lambdas: Vec<f64>,
    pub fractions: Vec<f64>,
    /// `values[i][j]` for `lambdas[i]`, `fractions[j]` (cm).
    pub values: Vec<Vec<f64>>,
}

impl SweepGrid {
    pub fn min(&self) -> f64 {
        self.values.iter().flatten().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Seed of a sweep cell; depends only on the cell's grid position.
pub fn cell_seed(seed: u64, i: usize, j: usize) -> u64 {
    crate::synthdata::sample_seed(seed, ((i as u64) << 32) | j as u64)
}

/// One training per cell with a per-cell seed, so cells can be evaluated in
/// any order.
pub fn sweep<T: Scalar>(
    train_set: &[PreparedSample<T>],
    val: &[PreparedSample<T>],
    base: &ExperimentConfig,
    lambdas: &[f64],
    fractions: &[f64],
    seed: u64,
) -> Result<SweepGrid, EvalError> {
    if lambdas.is_empty() || fractions.is_empty() {
        return Err(EvalError::EmptyGrid);
    }
    let mut values = vec![vec![0.0; fractions.len()]; lambdas.len()];
    for (i, &l) in lambdas.iter().enumerate() {
        for (j, &f) in fractions.iter().enumerate() {
            values[i][j] = sweep_cell(train_set, val, base, l, f, cell_seed(seed, i, j))?;
        }
    }
    Ok(SweepGrid { lambdas: lambdas.to_vec(), fractions: fractions.to_vec(), values })
}

pub fn sweep_cell<T: Scalar>(train_set: &[PreparedSample<T>], val: &[PreparedSample<T>], base: &ExperimentConfig, lambda: f64, fraction: f64, seed: u64) -> Result<f64, EvalError> {
    let mut c = base.clone();
    c.loss.lambda = lambda;
    c.train.fraction3d = fraction;
    train_and_score(train_set, val, &c, seed)
}

pub fn sweep_csv(g: &SweepGrid) -> String {
    let mut s = String::from("lambda,fraction3d,val_mpjpe3d_cm\n");
    for (i, l) in g.lambdas.iter().enumerate() {
        for (j, f) in g.fractions.iter().enumerate() {
            let _ = writeln!(s, "{l},{f},{:.4}", g.values[i][j]);
        }
    }
    s
}

pub fn curve_csv(bins: &[Bin], center_name: &str) -> String {
    let mut s = format!("{center_name},mpjpe3d_cm,samples\n");
    for b in bins {
        let _ = writeln!(s, "{:.4},{:.4},{}", b.center, b.mpjpe, b.samples);
    }
    s
}

/// Colour ramp from blue (low) to red (high).
fn ramp(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let r = (40.0 + 215.0 * t) as u8;
    let b = (255.0 - 215.0 * t) as u8;
    format!("#{r:02x}50{b:02x}")
}

/// Heat map of a sweep grid.
pub fn sweep_svg(g: &SweepGrid) -> String {
    let (cw, ch) = (70.0, 40.0);
    let (ox, oy) = (90.0, 40.0);
    let w = ox + cw * g.fractions.len() as f64 + 30.0;
    let h = oy + ch * g.lambdas.len() as f64 + 60.0;
    let (lo, hi) = (g.min(), g.max());
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n");
    let _ = writeln!(s, "<text x=\"{ox}\" y=\"20\">val MPJPE (cm): lambda (rows) x 3D fraction (columns)</text>");
    for (i, l) in g.lambdas.iter().enumerate() {
        let y = oy + ch * i as f64;
        let _ = writeln!(s, "<text x=\"10\" y=\"{}\">{l}</text>", y + ch / 2.0 + 4.0);
        for (j, _) in g.fractions.iter().enumerate() {
            let x = ox + cw * j as f64;
            let v = g.values[i][j];
            let _ = writeln!(s, "<rect x=\"{x}\" y=\"{y}\" width=\"{cw}\" height=\"{ch}\" fill=\"{}\" stroke=\"white\"/>", ramp((v - lo) / span));
            let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" fill=\"white\">{v:.2}</text>", x + 12.0, y + ch / 2.0 + 4.0);
        }
    }
    for (j, f) in g.fractions.iter().enumerate() {
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\">{f}</text>", ox + cw * j as f64 + 20.0, oy + ch * g.lambdas.len() as f64 + 18.0);
    }
    s.push_str("</svg>\n");
    s
}

/// Polyline plot of one curve.
pub fn curve_svg(bins: &[Bin], x_label: &str) -> String {
    let (w, h, m) = (480.0, 300.0, 50.0);
    let xs: Vec<f64> = bins.iter().map(|b| b.center).collect();
    let ys: Vec<f64> = bins.iter().map(|b| b.mpjpe).collect();
    let (x0, x1) = (xs.iter().copied().fold(f64::INFINITY, f64::min), xs.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    let y1 = ys.iter().copied().fold(0.0, f64::max).max(1e-9);
    let sx = |x: f64| m + (w - 2.0 * m) * if x1 > x0 { (x - x0) / (x1 - x0) } else { 0.5 };
    let sy = |y: f64| h - m - (h - 2.0 * m) * y / y1;
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n");
    let _ = writeln!(s, "<line x1=\"{m}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>", h - m, w - m, h - m);
    let _ = writeln!(s, "<line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{}\" stroke=\"black\"/>", h - m);
    let pts: Vec<String> = xs.iter().zip(&ys).map(|(&x, &y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
    let _ = writeln!(s, "<polyline points=\"{}\" fill=\"none\" stroke=\"#c03030\" stroke-width=\"2\"/>", pts.join(" "));
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\">{x_label}</text>", w / 2.0 - 30.0, h - 15.0);
    let _ = writeln!(s, "<text x=\"5\" y=\"{}\">MPJPE cm (max {y1:.1})</text>", m - 15.0);
    let _ = writeln!(s, "<text x=\"{m}\" y=\"{}\">{x0:.1}</text><text x=\"{}\" y=\"{}\">{x1:.1}</text>", h - m + 14.0, w - m - 20.0, h - m + 14.0);
    s.push_str("</svg>\n");
    s
}

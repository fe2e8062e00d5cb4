//! Losses, semi-supervised batch composition and the optimisation loop.

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Graph, ParamStore, Var};
use crate::checkpoint::{save_checkpoint, CheckpointError};
use crate::evalkit::evaluate;
use crate::fusion::{ModelConfig, ModelError, PoseModel, PreparedSample};
use crate::geometry::{CameraRig, Vec3};
use crate::pointops::shuffled_indices;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the 2D term.
    pub lambda: f64,
    /// Added under the square root of every joint distance.
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: 1e-2, epsilon: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplicative learning-rate decay per epoch.
    pub lr_decay: f64,
    /// Expected share of each batch drawn from the 3D-labelled pool.
    pub fraction3d: f64,
    pub seed: u64,
    /// Optimiser steps per epoch; `None` means one pass over the training
    /// set (`ceil(n / batch_size)` steps).
    pub steps_per_epoch: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            lr: 1e-4,
            lr_decay: 0.99,
            fraction3d: 0.25,
            seed: 0,
            steps_per_epoch: None,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    /// Learning rate used throughout epoch `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi(epoch as i32)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(0.0..=1.0).contains(&self.fraction3d) {
            return bad("fraction3d must lie in [0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr >= 0.0) || !(self.lr_decay > 0.0) {
            return bad("lr must be non-negative and lr_decay positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("Adam betas must lie in [0, 1) and eps be positive");
        }
        if self.steps_per_epoch == Some(0) {
            return bad("steps_per_epoch must be positive");
        }
        Ok(())
    }
}

/// Model, optimisation and loss settings of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("sample carries neither 2D nor 3D labels")]
    NoLabels,
    #[error("{0}")]
    EmptyPool(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

fn smooth_mean<T: Scalar, const K: usize>(a: &[[T; K]], b: &[[T; K]], mask: &[bool], eps: T) -> T {
    let mut sum = T::zero();
    let mut n = 0usize;
    for ((p, q), &m) in a.iter().zip(b).zip(mask) {
        if m {
            let sq: T = (0..K).map(|k| (p[k] - q[k]) * (p[k] - q[k])).sum();
            sum += (sq + eps).sqrt();
            n += 1;
        }
    }
    if n == 0 {
        T::zero()
    } else {
        sum / T::of(n as f64)
    }
}

/// Mean of `sqrt(|y_i - Π(pred_i)|² + eps)` over visible joints whose
/// prediction projects validly; 0 when none counts.
pub fn loss_2d<T: Scalar>(pred3d: &[Vec3<T>], gt2d: &[[T; 2]], vis: &[bool], cam: &CameraRig<T>, eps: T) -> T {
    assert_eq!(pred3d.len(), gt2d.len());
    assert_eq!(pred3d.len(), vis.len());
    let mut uv = Vec::with_capacity(pred3d.len());
    let mut mask = Vec::with_capacity(pred3d.len());
    for (p, &v) in pred3d.iter().zip(vis) {
        match cam.project(*p) {
            Ok(pr) if pr.valid && v => {
                uv.push(pr.uv);
                mask.push(true);
            }
            _ => {
                uv.push([T::zero(); 2]);
                mask.push(false);
            }
        }
    }
    smooth_mean(&uv, gt2d, &mask, eps)
}

/// Mean of `sqrt(|Y_i - pred_i|² + eps)` over visible joints (metres).
pub fn loss_3d<T: Scalar>(pred3d: &[Vec3<T>], gt3d: &[Vec3<T>], vis: &[bool], eps: T) -> T {
    assert_eq!(pred3d.len(), gt3d.len());
    assert_eq!(pred3d.len(), vis.len());
    smooth_mean(pred3d, gt3d, vis, eps)
}

/// Labels available to the loss of one sample.
#[derive(Clone, Copy, Debug)]
pub struct Targets<'a, T> {
    pub labels3d: Option<&'a [Vec3<T>]>,
    pub labels2d: Option<&'a [[T; 2]]>,
    pub visibility: &'a [bool],
    pub cam: &'a CameraRig<T>,
}

impl<'a, T: Scalar> Targets<'a, T> {
    pub fn of(p: &'a PreparedSample<T>) -> Self {
        Self { labels3d: p.labels3d.as_deref(), labels2d: p.labels2d.as_deref(), visibility: &p.visibility, cam: &p.cam }
    }

    /// Drops the 3D labels (2D-pool supervision).
    pub fn without_3d(mut self) -> Self {
        self.labels3d = None;
        self
    }
}

/// `L_3D + λ L_2D`, each term present only when its labels are.
pub fn total_loss<T: Scalar>(t: &Targets<T>, pred3d: &[Vec3<T>], w: &LossWeights) -> Result<T, TrainError> {
    if t.labels3d.is_none() && t.labels2d.is_none() {
        return Err(TrainError::NoLabels);
    }
    let eps = T::of(w.epsilon);
    let l3 = t.labels3d.map_or(T::zero(), |gt| loss_3d(pred3d, gt, t.visibility, eps));
    let l2 = t.labels2d.map_or(T::zero(), |gt| loss_2d(pred3d, gt, t.visibility, t.cam, eps));
    Ok(l3 + T::of(w.lambda) * l2)
}

/// [`loss_3d`] on a `[N_j, 3]` graph node.
pub fn loss_3d_graph<T: Scalar>(g: &mut Graph<T>, pred: Var, gt3d: &[Vec3<T>], vis: &[bool], eps: T) -> Var {
    let target: Vec<T> = gt3d.iter().flatten().copied().collect();
    g.smooth_norm_mean(pred, &target, vis, eps)
}

/// [`loss_2d`] on a `[N_j, 3]` world-frame graph node; the projection
/// enters the tape through its Jacobian.
pub fn loss_2d_graph<T: Scalar>(g: &mut Graph<T>, pred: Var, gt2d: &[[T; 2]], vis: &[bool], cam: &CameraRig<T>, eps: T) -> Var {
    let n = g.value(pred).rows();
    let mut values = Tensor::zeros(&[n, 2]);
    let mut jac = vec![T::zero(); n * 6];
    let mut mask = vec![false; n];
    for i in 0..n {
        let r = g.value(pred).row(i);
        let p = [r[0], r[1], r[2]];
        if let Ok((pr, j)) = cam.project_with_jacobian(p) {
            if pr.valid && vis[i] {
                values.row_mut(i).copy_from_slice(&pr.uv);
                for o in 0..2 {
                    jac[i * 6 + o * 3..i * 6 + o * 3 + 3].copy_from_slice(&j[o]);
                }
                mask[i] = true;
            }
        }
    }
    let uv = g.row_map(pred, values, jac);
    let target: Vec<T> = gt2d.iter().flatten().copied().collect();
    g.smooth_norm_mean(uv, &target, &mask, eps)
}

/// [`total_loss`] on the tape; `None` when no term applies with non-zero
/// weight (the sample cannot produce a gradient).
pub fn total_loss_graph<T: Scalar>(g: &mut Graph<T>, pred: Var, t: &Targets<T>, w: &LossWeights) -> Result<Option<Var>, TrainError> {
    if t.labels3d.is_none() && t.labels2d.is_none() {
        return Err(TrainError::NoLabels);
    }
    let eps = T::of(w.epsilon);
    let l3 = t.labels3d.map(|gt| loss_3d_graph(g, pred, gt, t.visibility, eps));
    let l2 = match t.labels2d {
        Some(gt) if w.lambda != 0.0 => {
            let l = loss_2d_graph(g, pred, gt, t.visibility, t.cam, eps);
            Some(g.scale(l, T::of(w.lambda)))
        }
        _ => None,
    };
    Ok(match (l3, l2) {
        (Some(a), Some(b)) => Some(g.add(a, b)),
        (a, b) => a.or(b),
    })
}

/// One batch entry: index into the training set and which pool it came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchItem {
    pub index: usize,
    pub from_3d: bool,
}

struct Pool {
    items: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
}

impl Pool {
    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos == self.order.len() {
            let perm = shuffled_indices(self.items.len(), rng.random());
            self.order = perm.into_iter().map(|i| self.items[i]).collect();
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Draws batches with a seeded, stochastically rounded number of 3D-pool
/// samples. Each pool is consumed without replacement and reshuffled once
/// exhausted.
pub struct BatchComposer {
    pool2d: Pool,
    pool3d: Pool,
    batch_size: usize,
    fraction3d: f64,
    rng: ChaCha8Rng,
}

impl BatchComposer {
    pub fn new(pool2d: Vec<usize>, pool3d: Vec<usize>, batch_size: usize, fraction3d: f64, seed: u64) -> Result<Self, TrainError> {
        if fraction3d > 0.0 && pool3d.is_empty() {
            return Err(TrainError::EmptyPool("fraction3d > 0 but the 3D pool is empty".into()));
        }
        if fraction3d < 1.0 && pool2d.is_empty() {
            return Err(TrainError::EmptyPool("fraction3d < 1 but the 2D pool is empty".into()));
        }
        let mk = |items: Vec<usize>| Pool { items, order: Vec::new(), pos: 0 };
        Ok(Self { pool2d: mk(pool2d), pool3d: mk(pool3d), batch_size, fraction3d, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    /// Number of 3D-pool samples in the next batch.
    fn count3d(&mut self) -> usize {
        let x = self.batch_size as f64 * self.fraction3d;
        let lo = x.floor();
        let up = self.rng.random::<f64>() < x - lo;
        lo as usize + usize::from(up)
    }

    pub fn compose_batch(&mut self) -> Vec<BatchItem> {
        let k = self.count3d().min(self.batch_size);
        let mut out = Vec::with_capacity(self.batch_size);
        for _ in 0..k {
            out.push(BatchItem { index: self.pool3d.next(&mut self.rng), from_3d: true });
        }
        for _ in k..self.batch_size {
            out.push(BatchItem { index: self.pool2d.next(&mut self.rng), from_3d: false });
        }
        out
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { beta1, beta2, eps, m: store.zeros_like(), v: store.zeros_like(), t: 0 }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) {
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(self.t));
        let c2 = T::of(1.0 - self.beta2.powi(self.t));
        let (lr, eps) = (T::of(lr), T::of(self.eps));
        for (k, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let p = store.get_mut(id);
            let (m, v, g) = (self.m[k].data_mut(), self.v[k].data_mut(), grads[k].data());
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p.data_mut()[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Loss and summed parameter gradients of one batch entry, or `None` when the
/// entry has no weighted term.
fn item_gradient<T: Scalar>(model: &PoseModel<T>, p: &PreparedSample<T>, from_3d: bool, w: &LossWeights) -> Result<Option<(T, Vec<Tensor<T>>)>, TrainError> {
    let t = if from_3d { Targets::of(p) } else { Targets::of(p).without_3d() };
    if t.labels3d.is_none() && t.labels2d.is_none() {
        return Err(TrainError::NoLabels);
    }
    if t.labels3d.is_none() && w.lambda == 0.0 {
        return Ok(None);
    }
    let mut g = Graph::new();
    let pred = model.forward_graph(&mut g, p)?;
    let Some(loss) = total_loss_graph(&mut g, pred, &t, w)? else { return Ok(None) };
    let grads = g.backward(loss);
    let mut acc = model.store.zeros_like();
    grads.accumulate_params(&g, &mut acc);
    Ok(Some((g.value(loss).data()[0], acc)))
}

/// Mean loss and mean gradient over a batch. The reduction runs in batch
/// order, so the result does not depend on the thread count.
pub fn batch_gradient<T: Scalar>(
    model: &PoseModel<T>,
    data: &[PreparedSample<T>],
    batch: &[BatchItem],
    w: &LossWeights,
) -> Result<(f64, Vec<Tensor<T>>), TrainError> {
    let parts: Vec<_> = batch.par_iter().map(|b| item_gradient(model, &data[b.index], b.from_3d, w)).collect();
    let mut acc = model.store.zeros_like();
    let mut loss = 0.0;
    for part in parts {
        if let Some((l, g)) = part? {
            loss += l.to_f64_lossy();
            for (a, x) in acc.iter_mut().zip(&g) {
                a.add_assign(x);
            }
        }
    }
    let inv = T::of(1.0 / batch.len() as f64);
    acc.iter_mut().for_each(|a| a.scale_assign(inv));
    Ok((loss / batch.len() as f64, acc))
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Validation MPJPE (cm); `None` without a validation set or 3D labels.
    pub val_mpjpe3d: Option<f64>,
    /// Validation 2D MPJPE (px).
    pub val_mpjpe2d: Option<f64>,
}

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,val_mpjpe3d_cm,val_mpjpe2d_px";

/// CSV with [`METRICS_HEADER`]; missing values are empty fields.
pub fn metrics_csv(log: &[EpochMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    let opt = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_default();
    for m in log {
        let _ = writeln!(s, "{},{:.9e},{:.8},{},{}", m.epoch, m.lr, m.train_loss, opt(m.val_mpjpe3d), opt(m.val_mpjpe2d));
    }
    s
}

/// Where and how often to write artefacts during training.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    /// Directory for `checkpoint_epochNNN.fpck`, `latest.fpck` and
    /// `metrics.csv`; nothing is written when `None`.
    pub dir: Option<PathBuf>,
    /// Keep only `latest.fpck` instead of one file per epoch.
    pub latest_only: bool,
}

pub struct TrainResult<T> {
    pub model: PoseModel<T>,
    pub log: Vec<EpochMetrics>,
}

/// Indices of samples with 2D labels (2D pool) and with 3D labels (3D
/// pool). A sample carrying both sits in both pools; drawn from the 2D pool
/// it is supervised in 2D only.
pub fn split_pools<T: Scalar>(data: &[PreparedSample<T>]) -> (Vec<usize>, Vec<usize>) {
    let p2 = data.iter().enumerate().filter(|(_, p)| p.labels2d.is_some()).map(|(i, _)| i).collect();
    let p3 = data.iter().enumerate().filter(|(_, p)| p.labels3d.is_some()).map(|(i, _)| i).collect();
    (p2, p3)
}

/// Trains a model initialised from `init_seed`.
pub fn train<T: Scalar>(
    data: &[PreparedSample<T>],
    val: &[PreparedSample<T>],
    cfg: &ExperimentConfig,
    init_seed: u64,
    out: &TrainOutputs,
) -> Result<TrainResult<T>, TrainError> {
    let model = PoseModel::init(&cfg.model, init_seed)?;
    train_from(model, data, val, cfg, out)
}

/// Continues training an existing model.
pub fn train_from<T: Scalar>(
    mut model: PoseModel<T>,
    data: &[PreparedSample<T>],
    val: &[PreparedSample<T>],
    cfg: &ExperimentConfig,
    out: &TrainOutputs,
) -> Result<TrainResult<T>, TrainError> {
    let tc = &cfg.train;
    tc.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyPool("empty training set".into()));
    }
    let (p2, p3) = split_pools(data);
    let mut composer = BatchComposer::new(p2, p3, tc.batch_size, tc.fraction3d, tc.seed)?;
    let mut adam = Adam::new(&model.store, tc.beta1, tc.beta2, tc.adam_eps);
    let steps = tc.steps_per_epoch.unwrap_or(data.len().div_ceil(tc.batch_size));
    if let Some(dir) = &out.dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut log = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        let lr = tc.lr_at(epoch);
        let mut total = 0.0;
        for step in 0..steps {
            let batch = composer.compose_batch();
            let (loss, grads) = batch_gradient(&model, data, &batch, &cfg.loss)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::Divergence { epoch, step, loss });
            }
            adam.step(&mut model.store, &grads, lr);
            total += loss;
        }
        let (v3, v2) = if val.is_empty() {
            (None, None)
        } else {
            let r = evaluate(&model, val)?;
            (r.report.mpjpe3d, r.report.mpjpe2d)
        };
        log.push(EpochMetrics { epoch, lr, train_loss: total / steps as f64, val_mpjpe3d: v3, val_mpjpe2d: v2 });
        if let Some(dir) = &out.dir {
            let latest = dir.join("latest.fpck");
            save_checkpoint(&model, &latest)?;
            if !out.latest_only {
                std::fs::copy(&latest, dir.join(format!("checkpoint_epoch{epoch:03}.fpck")))?;
            }
            write_atomic(&dir.join("metrics.csv"), metrics_csv(&log).as_bytes())?;
        }
    }
    Ok(TrainResult { model, log })
}

/// Writes through a temporary sibling and renames, so an interrupted run
/// never leaves a half-written file.
pub fn write_atomic(path: &std::path::Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

//! LiDAR point handling: box cropping, fixed-size padding, random Fourier
//! features and depth rasterization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autograd::{Graph, Var};
use crate::geometry::{CameraRig, OrientedBox, Vec3};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PointError {
    #[error("degenerate box: every size must be positive, got {0:?}")]
    DegenerateBox([f64; 3]),
    #[error("embedding width must be even, got {0}")]
    OddWidth(usize),
    #[error("invalid basis: {0}")]
    InvalidBasis(String),
}

/// World-frame points in metres.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud<T> {
    pub points: Vec<Vec3<T>>,
}

impl<T: Scalar> PointCloud<T> {
    pub fn new(points: Vec<Vec3<T>>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Fixed-size point set; rows with `mask == false` are exactly zero.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedCloud<T> {
    pub points: Vec<Vec3<T>>,
    pub mask: Vec<bool>,
}

impl<T: Scalar> PaddedCloud<T> {
    pub fn capacity(&self) -> usize {
        self.points.len()
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// `[n_max, 3]` tensor of the points.
    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::from_vec(&[self.points.len(), 3], self.points.iter().flatten().copied().collect())
    }
}

/// Points strictly inside or on the faces of `bx`, in input order.
pub fn crop_points<T: Scalar>(cloud: &PointCloud<T>, bx: &OrientedBox) -> Result<PointCloud<T>, PointError> {
    if bx.size.iter().any(|&s| !(s > 0.0)) {
        return Err(PointError::DegenerateBox(bx.size));
    }
    let half = bx.size.map(|s| T::of(s / 2.0));
    let points = cloud
        .points
        .iter()
        .filter(|&&p| {
            let q = bx.to_box_frame(p);
            (0..3).all(|k| q[k].abs() <= half[k])
        })
        .copied()
        .collect();
    Ok(PointCloud { points })
}

/// Seeded Fisher–Yates permutation of `0..n`: for `i` from `n-1` down to 1,
/// swap `i` with `rng.random_range(0..=i)` drawn from `ChaCha8Rng::seed_from_u64(seed)`.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Shuffles, trims to `n_max` and pads with zero rows.
pub fn pad_shuffle<T: Scalar>(cloud: &PointCloud<T>, n_max: usize, seed: u64) -> PaddedCloud<T> {
    assert!(n_max >= 1, "n_max must be at least 1");
    let order = shuffled_indices(cloud.len(), seed);
    let mut points = vec![[T::zero(); 3]; n_max];
    let mut mask = vec![false; n_max];
    for (slot, &i) in order.iter().take(n_max).enumerate() {
        points[slot] = cloud.points[i];
        mask[slot] = true;
    }
    PaddedCloud { points, mask }
}

/// Frozen Gaussian projection `B` (`[3, D_p / 2]`).
#[derive(Clone, Debug, PartialEq)]
pub struct FourierBasis<T> {
    pub b: Tensor<T>,
    pub sigma: f64,
}

impl<T: Scalar> FourierBasis<T> {
    pub fn from_matrix(b: Tensor<T>, sigma: f64) -> Result<Self, PointError> {
        if b.shape().len() != 2 || b.rows() != 3 {
            return Err(PointError::InvalidBasis(format!("expected [3, k], got {:?}", b.shape())));
        }
        if !b.is_finite() {
            return Err(PointError::InvalidBasis("non-finite entries".into()));
        }
        Ok(Self { b, sigma })
    }

    /// Output width `D_p`.
    pub fn width(&self) -> usize {
        2 * self.b.cols()
    }

    pub fn cast<U: Scalar>(&self) -> FourierBasis<U> {
        FourierBasis { b: self.b.cast(), sigma: self.sigma }
    }
}

/// Entries drawn i.i.d. from `N(0, sigma²)` with a seeded ChaCha8 stream.
pub fn make_basis<T: Scalar>(sigma: f64, d_p: usize, seed: u64) -> Result<FourierBasis<T>, PointError> {
    if d_p % 2 != 0 || d_p == 0 {
        return Err(PointError::OddWidth(d_p));
    }
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(PointError::InvalidBasis(format!("sigma {sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = d_p / 2;
    let data: Vec<T> = if sigma == 0.0 {
        vec![T::zero(); 3 * k]
    } else {
        let normal = Normal::new(0.0, sigma).expect("valid sigma");
        (0..3 * k).map(|_| T::of(normal.sample(&mut rng))).collect()
    };
    Ok(FourierBasis { b: Tensor::from_vec(&[3, k], data), sigma })
}

/// `[cos(2π P B), sin(2π P B)]` for `[N, 3]` points.
pub fn rff_embed<T: Scalar>(points: &Tensor<T>, basis: &FourierBasis<T>) -> Tensor<T> {
    assert_eq!(points.cols(), 3, "points must be [N, 3]");
    let n = points.rows();
    let k = basis.b.cols();
    let proj = points.matmul(&basis.b);
    let two_pi = T::of(2.0 * std::f64::consts::PI);
    let mut out = Tensor::zeros(&[n, 2 * k]);
    for r in 0..n {
        let src = proj.row(r);
        let dst = out.row_mut(r);
        for j in 0..k {
            let a = two_pi * src[j];
            dst[j] = a.cos();
            dst[k + j] = a.sin();
        }
    }
    out
}

/// Differentiable [`rff_embed`] on a graph node.
pub fn rff_embed_graph<T: Scalar>(g: &mut Graph<T>, points: Var, basis: &FourierBasis<T>) -> Var {
    let b = g.constant(basis.b.clone());
    let proj = g.matmul(points, b);
    let arg = g.scale(proj, T::of(2.0 * std::f64::consts::PI));
    let c = g.cos(arg);
    let s = g.sin(arg);
    g.concat_cols(&[c, s])
}

/// Per-pixel range in metres; 0 marks pixels without a return.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap<T> {
    pub height: usize,
    pub width: usize,
    pub values: Vec<T>,
}

impl<T: Scalar> DepthMap<T> {
    pub fn at(&self, row: usize, col: usize) -> T {
        self.values[row * self.width + col]
    }
}

/// Depth image of `cloud` on the camera's own pixel grid, truncated to
/// `height x width`.
pub fn rasterize_depth<T: Scalar>(cloud: &PointCloud<T>, cam: &CameraRig<T>, height: usize, width: usize) -> DepthMap<T> {
    rasterize_depth_mapped(cloud, cam, height, width, |uv| uv)
}

/// Like [`rasterize_depth`] with frame pixels passed through `to_grid` first
/// (e.g. into a crop). Each point writes its Euclidean range from the camera
/// centre to the nearest pixel; the smallest range wins.
pub fn rasterize_depth_mapped<T: Scalar>(
    cloud: &PointCloud<T>,
    cam: &CameraRig<T>,
    height: usize,
    width: usize,
    to_grid: impl Fn([T; 2]) -> [T; 2],
) -> DepthMap<T> {
    assert!(height > 0 && width > 0);
    let mut values = vec![T::zero(); height * width];
    let c = cam.center();
    for &p in &cloud.points {
        let Ok(pr) = cam.project(p) else { continue };
        if !pr.valid {
            continue;
        }
        let [u, v] = to_grid(pr.uv);
        let (col, row) = (u.round(), v.round());
        if !(col >= T::zero() && row >= T::zero() && col < T::of(width as f64) && row < T::of(height as f64)) {
            continue;
        }
        let idx = row.to_f64_lossy() as usize * width + col.to_f64_lossy() as usize;
        let range = ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt();
        if values[idx] == T::zero() || range < values[idx] {
            values[idx] = range;
        }
    }
    DepthMap { height, width, values }
}

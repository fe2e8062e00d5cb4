//! Point tokens, the joint-token transformer encoder and the joint head.
//!
//! A point token is `[K | F_i | rff(p_i)]`: the flattened camera, the image
//! feature sampled at the point's projection and the Fourier embedding of its
//! box-frame coordinates. Tokens are embedded by `E` (no bias), prefixed by
//! `N_j` learnable joint tokens and passed through pre-norm encoder layers;
//! an affine head reads one 3D joint (box frame) per joint token.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::backbone::{crop_projections, init_uniform, BackboneError, CropWindow, ImageCrop, RgbImage, UNet, UNetConfig};
use crate::geometry::{flatten_camera, transpose, CameraRig, OrientedBox, Vec3, CAMERA_VECTOR_LEN};
use crate::pointops::{crop_points, make_basis, pad_shuffle, rasterize_depth_mapped, rff_embed, FourierBasis, PaddedCloud, PointCloud, PointError};
use crate::scalar::Scalar;
use crate::synthdata::Sample;
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Points(#[from] PointError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid model config: {0}")]
    Config(String),
}

/// Joint order of the default 14-joint skeleton.
pub const JOINT_NAMES: [&str; 14] = [
    "nose",
    "head_center",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Side of the square person crop (pixels).
    pub crop_size: usize,
    /// `N_p^max`.
    pub max_points: usize,
    pub unet: UNetConfig,
    pub rff_sigma: f64,
    /// `D_p`.
    pub rff_dim: usize,
    /// `D_0`.
    pub d_model: usize,
    pub heads: usize,
    /// `L`.
    pub layers: usize,
    /// Feed-forward width as a multiple of `D_0`.
    pub ffn_mult: usize,
    /// `N_j`.
    pub n_joints: usize,
    /// `false` zeroes the RGB channels of the crop.
    pub use_rgb: bool,
    /// `false` zeroes the depth channel of the crop.
    pub use_depth: bool,
    /// `false` feeds raw box-frame coordinates instead of Fourier features.
    pub use_rff: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            crop_size: 128,
            max_points: 1024,
            unet: UNetConfig::default(),
            rff_sigma: 10.0,
            rff_dim: 64,
            d_model: 256,
            heads: 8,
            layers: 4,
            ffn_mult: 4,
            n_joints: 14,
            use_rgb: true,
            use_depth: true,
            use_rff: true,
        }
    }
}

impl ModelConfig {
    /// Reduced widths and resolution for single-core benchmark runs.
    pub fn desk() -> Self {
        Self {
            crop_size: 32,
            max_points: 128,
            unet: UNetConfig { in_channels: 4, encoder: vec![8, 16, 32, 64], decoder: vec![64, 32, 16, 8], out_channels: 16 },
            rff_dim: 16,
            d_model: 64,
            heads: 4,
            layers: 2,
            ..Self::default()
        }
    }

    /// Width of the point-embedding part of a token.
    pub fn point_dim(&self) -> usize {
        if self.use_rff {
            self.rff_dim
        } else {
            3
        }
    }

    /// `D = N_k + D_f + D_p`.
    pub fn token_width(&self) -> usize {
        CAMERA_VECTOR_LEN + self.unet.out_channels + self.point_dim()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.unet.validate()?;
        let bad = |m: &str| Err(ModelError::Config(m.into()));
        if self.crop_size == 0 || self.crop_size % self.unet.size_multiple() != 0 {
            return bad("crop_size must be a positive multiple of 2^(levels-1)");
        }
        if self.unet.in_channels != 4 {
            return bad("the crop has 4 channels (RGB + depth)");
        }
        if self.max_points == 0 || self.n_joints == 0 {
            return bad("max_points and n_joints must be positive");
        }
        if self.rff_dim == 0 || self.rff_dim % 2 != 0 {
            return bad("rff_dim must be even and positive");
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad("d_model must be divisible by heads");
        }
        if self.ffn_mult == 0 || !(self.rff_sigma >= 0.0) {
            return bad("ffn_mult must be positive and rff_sigma non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct LayerIds {
    ln1: (ParamId, ParamId),
    wq: (ParamId, ParamId),
    wk: (ParamId, ParamId),
    wv: (ParamId, ParamId),
    wo: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
struct FusionIds {
    embed: ParamId,
    joints: ParamId,
    layers: Vec<LayerIds>,
    head: (ParamId, ParamId),
}

/// Weights plus the frozen Fourier basis.
#[derive(Clone, Debug)]
pub struct PoseModel<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub basis: FourierBasis<T>,
    unet: UNet,
    ids: FusionIds,
}

/// Scale of the initial head weights relative to fan-in scaling.
const HEAD_INIT_SCALE: f64 = 0.1;

fn seed_stream(seed: u64, k: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k)
}

fn layer_names(l: usize) -> [(String, String); 8] {
    let p = |s: &str| (format!("fusion.layer{l}.{s}.w"), format!("fusion.layer{l}.{s}.b"));
    [p("ln1"), p("q"), p("k"), p("v"), p("o"), p("ln2"), p("ff1"), p("ff2")]
}

impl<T: Scalar> PoseModel<T> {
    /// Fresh weights; every tensor is drawn from streams derived from `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut store = ParamStore::new();
        UNet::init(&config.unet, &mut store, seed_stream(seed, 1))?;
        let basis = make_basis(config.rff_sigma, config.rff_dim, seed_stream(seed, 2))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed_stream(seed, 3));
        let (d, d0) = (config.token_width(), config.d_model);
        let dff = d0 * config.ffn_mult;
        store.add("fusion.E", init_uniform(&[d, d0], d, &mut rng));
        store.add("fusion.joints", init_uniform(&[config.n_joints, d0], 1, &mut rng));
        for l in 0..config.layers {
            let n = layer_names(l);
            let shapes = [(d0, d0), (d0, d0), (d0, d0), (d0, d0), (d0, d0), (d0, d0), (d0, dff), (dff, d0)];
            for (k, ((wn, bn), (i, o))) in n.into_iter().zip(shapes).enumerate() {
                if k == 0 || k == 5 {
                    store.add(wn, Tensor::full(&[d0], T::one()));
                    store.add(bn, Tensor::zeros(&[d0]));
                } else {
                    store.add(wn, init_uniform(&[i, o], i, &mut rng));
                    store.add(bn, Tensor::zeros(&[o]));
                }
            }
        }
        let mut hw: Tensor<T> = init_uniform(&[d0, 3], d0, &mut rng);
        hw.scale_assign(T::of(HEAD_INIT_SCALE));
        store.add("fusion.head.w", hw);
        store.add("fusion.head.b", Tensor::zeros(&[3]));
        Self::from_parts(config.clone(), store, basis)
    }

    /// Binds a configuration to existing weights (e.g. from a checkpoint).
    pub fn from_parts(config: ModelConfig, store: ParamStore<T>, basis: FourierBasis<T>) -> Result<Self, ModelError> {
        config.validate()?;
        if basis.width() != config.rff_dim {
            return Err(ModelError::Config(format!("basis width {} != rff_dim {}", basis.width(), config.rff_dim)));
        }
        let unet = UNet::bind(&config.unet, &store)?;
        let find = |name: &str| store.find(name).ok_or_else(|| ModelError::Config(format!("missing parameter {name}")));
        let pair = |(w, b): &(String, String)| -> Result<(ParamId, ParamId), ModelError> { Ok((find(w)?, find(b)?)) };
        let mut layers = Vec::new();
        for l in 0..config.layers {
            let n = layer_names(l);
            layers.push(LayerIds {
                ln1: pair(&n[0])?,
                wq: pair(&n[1])?,
                wk: pair(&n[2])?,
                wv: pair(&n[3])?,
                wo: pair(&n[4])?,
                ln2: pair(&n[5])?,
                ff1: pair(&n[6])?,
                ff2: pair(&n[7])?,
            });
        }
        let ids = FusionIds {
            embed: find("fusion.E")?,
            joints: find("fusion.joints")?,
            layers,
            head: (find("fusion.head.w")?, find("fusion.head.b")?),
        };
        let (d, d0) = (config.token_width(), config.d_model);
        let expect = |id: ParamId, shape: &[usize]| {
            if store.get(id).shape() == shape {
                Ok(())
            } else {
                Err(ModelError::Shape(format!("{}: expected {shape:?}, got {:?}", store.name(id), store.get(id).shape())))
            }
        };
        expect(ids.embed, &[d, d0])?;
        expect(ids.joints, &[config.n_joints, d0])?;
        expect(ids.head.0, &[d0, 3])?;
        Ok(Self { config, store, basis, unet, ids })
    }

    pub fn unet(&self) -> &UNet {
        &self.unet
    }

    /// Parameter count of the joint head.
    pub fn head_param_count(&self) -> usize {
        self.store.get(self.ids.head.0).len() + self.store.get(self.ids.head.1).len()
    }

    pub fn cast<U: Scalar>(&self) -> PoseModel<U> {
        PoseModel::from_parts(self.config.clone(), self.store.cast(), self.basis.cast()).expect("same layout")
    }

    /// Embeds `[N, D]` point tokens and prefixes the joint tokens.
    pub fn embed_graph(&self, g: &mut Graph<T>, tokens: Var) -> Var {
        let joints = g.param(&self.store, self.ids.joints);
        if g.value(tokens).rows() == 0 {
            return joints;
        }
        let e = g.param(&self.store, self.ids.embed);
        let emb = g.matmul(tokens, e);
        g.concat0(&[joints, emb])
    }

    fn encoder_layer(&self, g: &mut Graph<T>, x: Var, ids: &LayerIds, mask: &[bool]) -> Var {
        let s = &self.store;
        let p = |g: &mut Graph<T>, (a, b): (ParamId, ParamId)| (g.param(s, a), g.param(s, b));
        let (g1, b1) = p(g, ids.ln1);
        let h = g.layer_norm(x, g1, b1);
        let (wq, bq) = p(g, ids.wq);
        let (wk, bk) = p(g, ids.wk);
        let (wv, bv) = p(g, ids.wv);
        let q = g.linear(h, wq, bq);
        let k = g.linear(h, wk, bk);
        let v = g.linear(h, wv, bv);
        let a = g.attention(q, k, v, self.config.heads, mask);
        let (wo, bo) = p(g, ids.wo);
        let o = g.linear(a, wo, bo);
        let x = g.add(x, o);
        let (g2, b2) = p(g, ids.ln2);
        let h = g.layer_norm(x, g2, b2);
        let (w1, c1) = p(g, ids.ff1);
        let f = g.linear(h, w1, c1);
        let f = g.gelu(f);
        let (w2, c2) = p(g, ids.ff2);
        let f = g.linear(f, w2, c2);
        g.add(x, f)
    }

    /// All encoder layers over `[N_j + N, D_0]`; keys with `mask == false`
    /// are never attended to.
    pub fn encode_graph(&self, g: &mut Graph<T>, x: Var, mask: &[bool]) -> Var {
        let mut x = x;
        for ids in &self.ids.layers {
            x = self.encoder_layer(g, x, ids, mask);
        }
        x
    }

    /// Affine head on the first `N_j` rows: `[N_j, 3]` in the box frame.
    pub fn read_joints_graph(&self, g: &mut Graph<T>, encoded: Var) -> Var {
        let j = g.slice_rows(encoded, 0, self.config.n_joints);
        let w = g.param(&self.store, self.ids.head.0);
        let b = g.param(&self.store, self.ids.head.1);
        g.linear(j, w, b)
    }

    /// Records the full pipeline for one prepared sample and returns the
    /// world-frame joints `[N_j, 3]`.
    ///
    /// Padded point tokens are dropped before the encoder. This gives the
    /// same joint outputs as running the key-padding mask over them.
    pub fn forward_graph(&self, g: &mut Graph<T>, p: &PreparedSample<T>) -> Result<Var, ModelError> {
        let input = g.constant(self.masked_input(&p.crop.input));
        let feat = self.unet.forward(g, &self.store, input)?;
        let real: Vec<usize> = (0..p.padded.capacity()).filter(|&i| p.padded.mask[i]).collect();
        let n = real.len();
        let tokens = if n == 0 {
            g.constant(Tensor::zeros(&[0, self.config.token_width()]))
        } else {
            let cam = g.constant(Tensor::from_fn(&[n, CAMERA_VECTOR_LEN], |i| p.camvec[i % CAMERA_VECTOR_LEN]));
            let uv = g.constant(Tensor::from_vec(&[n, 2], real.iter().flat_map(|&i| p.uv[i]).collect()));
            let ok: Vec<bool> = real.iter().map(|&i| p.uv_ok[i]).collect();
            let img = g.bilinear(feat, uv, &ok);
            let pts = Tensor::from_vec(&[n, 3], real.iter().flat_map(|&i| p.box_points.row(i).to_vec()).collect());
            let pe = if self.config.use_rff { rff_embed(&pts, &self.basis) } else { pts };
            let pe = g.constant(pe);
            g.concat_cols(&[cam, img, pe])
        };
        let x = self.embed_graph(g, tokens);
        let mask = vec![true; self.config.n_joints + n];
        let enc = self.encode_graph(g, x, &mask);
        let y = self.read_joints_graph(g, enc);
        Ok(box_to_world_graph(g, y, &p.box3d))
    }

    fn masked_input(&self, input: &Tensor<T>) -> Tensor<T> {
        let mut x = input.clone();
        let plane = x.len() / 4;
        if !self.config.use_rgb {
            x.data_mut()[..3 * plane].iter_mut().for_each(|v| *v = T::zero());
        }
        if !self.config.use_depth {
            x.data_mut()[3 * plane..].iter_mut().for_each(|v| *v = T::zero());
        }
        x
    }

    /// World-frame joints for one prepared sample.
    pub fn predict(&self, p: &PreparedSample<T>) -> Result<Vec<Vec3<T>>, ModelError> {
        let mut g = Graph::new();
        let y = self.forward_graph(&mut g, p)?;
        Ok(g.value(y).data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    /// Embeds a token sequence: output `[N_j + N, D_0]`, mask with the joint
    /// tokens set.
    pub fn embed(&self, tokens: &Tensor<T>, mask: &[bool]) -> TokenSequence<T> {
        let mut g = Graph::new();
        let t = g.constant(tokens.clone());
        let x = self.embed_graph(&mut g, t);
        let mut m = vec![true; self.config.n_joints];
        m.extend_from_slice(mask);
        TokenSequence { tokens: g.value(x).clone(), mask: m }
    }

    /// Runs the encoder layers under the sequence's key-padding mask.
    pub fn encode(&self, seq: &TokenSequence<T>) -> TokenSequence<T> {
        let mut g = Graph::new();
        let x = g.constant(seq.tokens.clone());
        let y = self.encode_graph(&mut g, x, &seq.mask);
        TokenSequence { tokens: g.value(y).clone(), mask: seq.mask.clone() }
    }

    /// `[N_j, 3]` box-frame joints from an encoded sequence.
    pub fn read_joints(&self, seq: &TokenSequence<T>) -> Tensor<T> {
        let mut g = Graph::new();
        let x = g.constant(seq.tokens.clone());
        let y = self.read_joints_graph(&mut g, x);
        g.value(y).clone()
    }

    /// Full pipeline on a raw sample.
    pub fn forward(&self, sample: &Sample) -> Result<JointSet<T>, ModelError> {
        let p = PreparedSample::new(sample, &self.config)?;
        let joints = self.predict(&p)?;
        let mut uv = Vec::with_capacity(joints.len());
        let mut vis = Vec::with_capacity(joints.len());
        for j in &joints {
            match p.cam.project(*j) {
                Ok(pr) if pr.valid => {
                    uv.push(pr.uv);
                    vis.push(true);
                }
                _ => {
                    uv.push([T::nan(); 2]);
                    vis.push(false);
                }
            }
        }
        Ok(JointSet { positions3d: joints, positions2d: Some(uv), visibility: vis })
    }
}

/// `y · Rᵀ + c`: box frame to world.
pub fn box_to_world_graph<T: Scalar>(g: &mut Graph<T>, y: Var, b: &OrientedBox) -> Var {
    let r = transpose(&b.rotation::<T>());
    let rt = g.constant(Tensor::from_vec(&[3, 3], r.iter().flatten().copied().collect()));
    let c = g.constant(Tensor::from_vec(&[3], b.center.iter().map(|&x| T::of(x)).collect()));
    let w = g.matmul(y, rt);
    g.add_bias(w, c)
}

/// Token matrix plus key mask (`true` = real token).
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T> {
    pub tokens: Tensor<T>,
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointSet<T> {
    pub positions3d: Vec<Vec3<T>>,
    pub positions2d: Option<Vec<[T; 2]>>,
    pub visibility: Vec<bool>,
}

/// `[N, N_k + D_f + D_p]` rows `(K, F_i, P̃_i)`; rows with `mask == false`
/// are zero, camera prefix included.
pub fn assemble_tokens<T: Scalar>(camvec: &[T], imgfeat: &Tensor<T>, rff: &Tensor<T>, mask: &[bool]) -> Result<Tensor<T>, ModelError> {
    let n = mask.len();
    if imgfeat.rows() != n || rff.rows() != n {
        return Err(ModelError::Shape(format!("row counts {} / {} vs mask {n}", imgfeat.rows(), rff.rows())));
    }
    if camvec.len() != CAMERA_VECTOR_LEN {
        return Err(ModelError::Shape(format!("camera vector has {} entries, expected {CAMERA_VECTOR_LEN}", camvec.len())));
    }
    let (df, dp) = (imgfeat.cols(), rff.cols());
    let d = camvec.len() + df + dp;
    let mut out = Tensor::zeros(&[n, d]);
    for (i, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        let row = out.row_mut(i);
        row[..camvec.len()].copy_from_slice(camvec);
        row[camvec.len()..camvec.len() + df].copy_from_slice(imgfeat.row(i));
        row[camvec.len() + df..].copy_from_slice(rff.row(i));
    }
    Ok(out)
}

/// Everything about a sample that does not depend on the weights.
#[derive(Clone, Debug)]
pub struct PreparedSample<T> {
    pub crop: ImageCrop<T>,
    pub window: CropWindow,
    pub camvec: Vec<T>,
    pub cam: CameraRig<T>,
    pub box3d: OrientedBox,
    /// World-frame points after the box crop and pad/shuffle.
    pub padded: PaddedCloud<T>,
    /// `[N_max, 3]` box-frame coordinates, zero rows for padding.
    pub box_points: Tensor<T>,
    /// Crop-grid projection of each padded point.
    pub uv: Vec<[T; 2]>,
    pub uv_ok: Vec<bool>,
    /// World-frame joints, when the sample carries 3D labels.
    pub labels3d: Option<Vec<Vec3<T>>>,
    pub labels2d: Option<Vec<[T; 2]>>,
    pub visibility: Vec<bool>,
    /// Horizontal camera distance (m).
    pub distance: f64,
}

impl<T: Scalar> PreparedSample<T> {
    /// Box crop, depth rasterization into the person crop, image resampling
    /// and pad/shuffle seeded by the sample id.
    pub fn new(sample: &Sample, config: &ModelConfig) -> Result<Self, ModelError> {
        let s = config.crop_size;
        let window = CropWindow::around(&sample.box2d, s);
        let cam: CameraRig<T> = sample.cam.cast();
        let cloud = PointCloud::new(sample.cloud.points.iter().map(|p| p.map(|x| T::of(x as f64))).collect());
        let cropped = crop_points(&cloud, &sample.box3d)?;
        let depth = rasterize_depth_mapped(&cropped, &cam, s, s, |uv| window.to_crop(uv));
        let frame = RgbImage { height: sample.image.height, width: sample.image.width, data: sample.image.data.iter().map(|&x| T::of(x as f64)).collect() };
        let crop = ImageCrop::from_frame(&frame, &window, &depth.values);
        let padded = pad_shuffle(&cropped, config.max_points, sample.id);
        let box_points = Tensor::from_vec(
            &[config.max_points, 3],
            padded.points.iter().zip(&padded.mask).flat_map(|(p, &m)| if m { sample.box3d.to_box_frame(*p) } else { [T::zero(); 3] }).collect(),
        );
        let (uv, uv_ok) = crop_projections(&padded, &cam, &window);
        Ok(Self {
            crop,
            window,
            camvec: flatten_camera(&cam).values,
            cam,
            box3d: sample.box3d,
            padded,
            box_points,
            uv,
            uv_ok,
            labels3d: sample.labels3d.as_ref().map(|l| l.iter().map(|p| p.map(T::of)).collect()),
            labels2d: sample.labels2d.as_ref().map(|l| l.iter().map(|p| p.map(T::of)).collect()),
            visibility: sample.visibility.clone(),
            distance: sample.distance(),
        })
    }
}

/// Prepares every sample in parallel, keeping input order.
pub fn prepare_all<T: Scalar>(samples: &[Sample], config: &ModelConfig) -> Result<Vec<PreparedSample<T>>, ModelError> {
    use rayon::prelude::*;
    samples.par_iter().map(|s| PreparedSample::new(s, config)).collect()
}

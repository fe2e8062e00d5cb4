//! Person crops, the convolutional encoder-decoder and pixel-aligned
//! sampling of its feature map.
//!
//! Maps are channels-first `[C, H, W]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{BilinearStencil, Graph, ParamId, ParamStore, Var};
use crate::geometry::{Box2d, CameraRig};
use crate::pointops::PaddedCloud;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackboneError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid backbone config: {0}")]
    Config(String),
}

/// Margin added around the 2D box on every side, as a fraction of its size.
pub const CROP_MARGIN: f64 = 0.1;

/// Square window mapping frame pixels to crop pixels:
/// `crop = (frame - (x0, y0)) * scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropWindow {
    pub x0: f64,
    pub y0: f64,
    pub scale: f64,
    pub size: usize,
}

impl CropWindow {
    /// Square around `b` enlarged by [`CROP_MARGIN`] on each side.
    pub fn around(b: &Box2d, size: usize) -> Self {
        let side = b.w.max(b.h).max(1.0) * (1.0 + 2.0 * CROP_MARGIN);
        let (cx, cy) = (b.x + b.w / 2.0, b.y + b.h / 2.0);
        Self { x0: cx - side / 2.0, y0: cy - side / 2.0, scale: size as f64 / side, size }
    }

    pub fn to_crop<T: Scalar>(&self, uv: [T; 2]) -> [T; 2] {
        let s = T::of(self.scale);
        [(uv[0] - T::of(self.x0)) * s, (uv[1] - T::of(self.y0)) * s]
    }

    pub fn to_frame<T: Scalar>(&self, uv: [T; 2]) -> [T; 2] {
        let s = T::of(self.scale);
        [uv[0] / s + T::of(self.x0), uv[1] / s + T::of(self.y0)]
    }
}

/// Channels-last RGB frame with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> RgbImage<T> {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![T::zero(); height * width * 3] }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [T; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [T; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Network input: `[4, S, S]` holding RGB in channels 0..3 and depth (m)
/// in channel 3.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageCrop<T> {
    pub input: Tensor<T>,
}

impl<T: Scalar> ImageCrop<T> {
    pub fn size(&self) -> usize {
        self.input.shape()[1]
    }

    /// Resamples the frame inside `win` (bilinear, zero outside) and stacks
    /// `depth` (already on the crop grid) as the fourth channel.
    pub fn from_frame(frame: &RgbImage<T>, win: &CropWindow, depth: &[T]) -> Self {
        let s = win.size;
        assert_eq!(depth.len(), s * s, "depth grid must match the crop");
        let mut input = Tensor::zeros(&[4, s, s]);
        let plane = s * s;
        for i in 0..s {
            for j in 0..s {
                let [u, v] = win.to_frame([T::of(j as f64), T::of(i as f64)]);
                if let Some(st) = BilinearStencil::new(u, v, frame.height, frame.width) {
                    for c in 0..3 {
                        input.data_mut()[c * plane + i * s + j] = st.eval_strided(&frame.data, frame.width, 3, c);
                    }
                }
            }
        }
        input.data_mut()[3 * plane..].copy_from_slice(depth);
        Self { input }
    }
}

/// Dense `[D_f, H, W]` features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub values: Tensor<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub in_channels: usize,
    /// Channels per encoder level; level 0 runs at full resolution, each
    /// further level halves it.
    pub encoder: Vec<usize>,
    /// Channels per decoder level, deepest first.
    pub decoder: Vec<usize>,
    /// Output width `D_f`.
    pub out_channels: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self { in_channels: 4, encoder: vec![32, 64, 128, 256], decoder: vec![256, 128, 64, 32], out_channels: 32 }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<(), BackboneError> {
        if self.encoder.is_empty() || self.encoder.len() != self.decoder.len() {
            return Err(BackboneError::Config("encoder and decoder need the same nonzero number of levels".into()));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.encoder.iter().chain(&self.decoder).any(|&c| c == 0) {
            return Err(BackboneError::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    /// Crop sizes must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.encoder.len() - 1)
    }
}

/// Largest group count ≤ 8 dividing `c`.
pub fn norm_groups(c: usize) -> usize {
    (1..=8.min(c)).rev().find(|g| c % g == 0).unwrap_or(1)
}

#[derive(Clone, Debug)]
struct ConvBlock {
    w: ParamId,
    b: ParamId,
    gamma: ParamId,
    beta: ParamId,
}

/// Parameter handles of the encoder-decoder inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct UNet {
    pub config: UNetConfig,
    enc: Vec<[ConvBlock; 2]>,
    dec: Vec<[ConvBlock; 2]>,
    head_w: ParamId,
    head_b: ParamId,
}

/// Fan-in scaled uniform weights `U(-sqrt(3 / fan_in), sqrt(3 / fan_in))`.
pub fn init_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = (3.0 / fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::from_fn(shape, |_| T::of(dist.sample(rng)))
}

fn add_block<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> ConvBlock {
    ConvBlock {
        w: store.add(format!("{prefix}.w"), init_uniform(&[cout, cin, 3, 3], cin * 9, rng)),
        b: store.add(format!("{prefix}.b"), Tensor::zeros(&[cout])),
        gamma: store.add(format!("{prefix}.gn_gamma"), Tensor::full(&[cout], T::one())),
        beta: store.add(format!("{prefix}.gn_beta"), Tensor::zeros(&[cout])),
    }
}

impl UNet {
    /// Registers freshly initialised weights under `unet.*`.
    pub fn init<T: Scalar>(config: &UNetConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self, BackboneError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = config.encoder.len();
        let mut enc = Vec::with_capacity(n);
        let mut cin = config.in_channels;
        for (i, &c) in config.encoder.iter().enumerate() {
            let a = add_block(store, &format!("unet.enc{i}.conv0"), cin, c, &mut rng);
            let b = add_block(store, &format!("unet.enc{i}.conv1"), c, c, &mut rng);
            enc.push([a, b]);
            cin = c;
        }
        let mut dec = Vec::with_capacity(n);
        for (j, &c) in config.decoder.iter().enumerate() {
            let skip = if j == 0 { 0 } else { config.encoder[n - 1 - j] };
            let a = add_block(store, &format!("unet.dec{j}.conv0"), cin + skip, c, &mut rng);
            let b = add_block(store, &format!("unet.dec{j}.conv1"), c, c, &mut rng);
            dec.push([a, b]);
            cin = c;
        }
        let head_w = store.add("unet.head.w", init_uniform(&[config.out_channels, cin, 3, 3], cin * 9, &mut rng));
        let head_b = store.add("unet.head.b", Tensor::zeros(&[config.out_channels]));
        Ok(Self { config: config.clone(), enc, dec, head_w, head_b })
    }

    /// Re-binds handles to parameters already present in `store` by name.
    pub fn bind<T: Scalar>(config: &UNetConfig, store: &ParamStore<T>) -> Result<Self, BackboneError> {
        config.validate()?;
        let find = |name: String| store.find(&name).ok_or_else(|| BackboneError::Config(format!("missing parameter {name}")));
        let block = |prefix: String| -> Result<ConvBlock, BackboneError> {
            Ok(ConvBlock {
                w: find(format!("{prefix}.w"))?,
                b: find(format!("{prefix}.b"))?,
                gamma: find(format!("{prefix}.gn_gamma"))?,
                beta: find(format!("{prefix}.gn_beta"))?,
            })
        };
        let enc = (0..config.encoder.len())
            .map(|i| Ok([block(format!("unet.enc{i}.conv0"))?, block(format!("unet.enc{i}.conv1"))?]))
            .collect::<Result<Vec<_>, BackboneError>>()?;
        let dec = (0..config.decoder.len())
            .map(|j| Ok([block(format!("unet.dec{j}.conv0"))?, block(format!("unet.dec{j}.conv1"))?]))
            .collect::<Result<Vec<_>, BackboneError>>()?;
        Ok(Self { config: config.clone(), enc, dec, head_w: find("unet.head.w".into())?, head_b: find("unet.head.b".into())? })
    }

    fn block<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, blk: &ConvBlock, stride: usize) -> Var {
        let w = g.param(store, blk.w);
        let b = g.param(store, blk.b);
        let y = g.conv3x3(x, w, b, stride);
        let gamma = g.param(store, blk.gamma);
        let beta = g.param(store, blk.beta);
        let c = g.shape(y)[0];
        let y = g.group_norm(y, gamma, beta, norm_groups(c));
        g.silu(y)
    }

    /// Records the forward pass of a `[C_in, S, S]` input; returns `[D_f, S, S]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, input: Var) -> Result<Var, BackboneError> {
        let s = g.shape(input).to_vec();
        if s.len() != 3 || s[0] != self.config.in_channels {
            return Err(BackboneError::Shape(format!("expected [{}, H, W] input, got {s:?}", self.config.in_channels)));
        }
        let m = self.config.size_multiple();
        if s[1] == 0 || s[2] == 0 || s[1] % m != 0 || s[2] % m != 0 {
            return Err(BackboneError::Shape(format!("spatial size {}x{} must be a positive multiple of {m}", s[1], s[2])));
        }
        let mut skips = Vec::with_capacity(self.enc.len());
        let mut x = input;
        for (i, [a, b]) in self.enc.iter().enumerate() {
            x = self.block(g, store, x, a, if i == 0 { 1 } else { 2 });
            x = self.block(g, store, x, b, 1);
            skips.push(x);
        }
        let n = self.enc.len();
        for (j, [a, b]) in self.dec.iter().enumerate() {
            if j > 0 {
                let up = g.upsample2(x);
                x = g.concat0(&[up, skips[n - 1 - j]]);
            }
            x = self.block(g, store, x, a, 1);
            x = self.block(g, store, x, b, 1);
        }
        let w = g.param(store, self.head_w);
        let b = g.param(store, self.head_b);
        Ok(g.conv3x3(x, w, b, 1))
    }
}

/// Runs the encoder-decoder on a crop without keeping the tape.
pub fn unet_forward<T: Scalar>(unet: &UNet, store: &ParamStore<T>, crop: &ImageCrop<T>) -> Result<FeatureMap<T>, BackboneError> {
    let mut g = Graph::new();
    let x = g.constant(crop.input.clone());
    let y = unet.forward(&mut g, store, x)?;
    Ok(FeatureMap { values: g.value(y).clone() })
}

/// Bilinear blend of the four pixels around `uv` (column, row); zeros when
/// `uv` falls outside `[0, W-1] x [0, H-1]`.
pub fn bilinear_sample<T: Scalar>(f: &FeatureMap<T>, uv: [T; 2]) -> Vec<T> {
    let s = f.values.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    match BilinearStencil::new(uv[0], uv[1], h, w) {
        Some(st) => (0..c).map(|ch| st.eval(&f.values.data()[ch * h * w..(ch + 1) * h * w], w)).collect(),
        None => vec![T::zero(); c],
    }
}

/// Crop-grid pixel of every padded point and whether it should be sampled
/// (real point with a valid projection).
pub fn crop_projections<T: Scalar>(padded: &PaddedCloud<T>, cam: &CameraRig<T>, win: &CropWindow) -> (Vec<[T; 2]>, Vec<bool>) {
    let mut uv = Vec::with_capacity(padded.capacity());
    let mut ok = Vec::with_capacity(padded.capacity());
    for (p, &m) in padded.points.iter().zip(&padded.mask) {
        let pr = if m { cam.project(*p).ok() } else { None };
        match pr {
            Some(pr) if pr.valid => {
                uv.push(win.to_crop(pr.uv));
                ok.push(true);
            }
            _ => {
                uv.push([T::zero(); 2]);
                ok.push(false);
            }
        }
    }
    (uv, ok)
}

/// `[N_max, D_f]` features sampled at the projections of the padded points.
pub fn pixel_align<T: Scalar>(f: &FeatureMap<T>, padded: &PaddedCloud<T>, cam: &CameraRig<T>, win: &CropWindow) -> Tensor<T> {
    let (uv, ok) = crop_projections(padded, cam, win);
    let c = f.channels();
    let mut out = Tensor::zeros(&[uv.len(), c]);
    for (i, (q, &m)) in uv.iter().zip(&ok).enumerate() {
        if m {
            out.row_mut(i).copy_from_slice(&bilinear_sample(f, *q));
        }
    }
    out
}

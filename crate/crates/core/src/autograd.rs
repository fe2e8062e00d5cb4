//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass as a node holding
//! its value and the inputs it was computed from. [`Graph::backward`] walks the
//! tape in reverse and returns the gradient of a scalar node with respect to
//! every node that depends on a parameter or a [`Graph::variable`].
//!
//! Layouts: matrices are `[rows, cols]`; feature maps are channels-first
//! `[C, H, W]` for a single sample.

use std::collections::HashMap;
use std::sync::Arc;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Handle to a tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named, trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Arc<Tensor<T>>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(Arc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    /// Zero tensors shaped like every parameter.
    pub fn zeros_like(&self) -> Vec<Tensor<T>> {
        self.values.iter().map(|t| Tensor::zeros(t.shape())).collect()
    }

    fn shared(&self, id: ParamId) -> Arc<Tensor<T>> {
        Arc::clone(&self.values[id.0])
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), values: self.values.iter().map(|t| Arc::new(t.cast())).collect() }
    }
}

enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Silu(Var),
    Sin(Var),
    Cos(Var),
    Concat0(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    MaskRows(Var, Vec<bool>),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, xhat: Vec<T>, rstd: Vec<T> },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, cols: Vec<T> },
    Upsample2(Var),
    Bilinear { feat: Var, uv: Var, mask: Vec<bool> },
    Attention { q: Var, k: Var, v: Var, heads: usize, keys: Vec<usize>, probs: Vec<T> },
    RowJacobian { x: Var, jac: Vec<T> },
    SmoothNormMean { pred: Var, target: Vec<T>, mask: Vec<bool>, eps: T },
    Sum(Var),
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording of one forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<usize, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const NORM_EPS: f64 = 1e-5;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, needs_grad)
    }

    fn push_shared(&mut self, value: Arc<Tensor<T>>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Input that is not differentiated.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is reported by [`Graph::backward`].
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id.0) {
            return v;
        }
        let v = self.push_shared(store.shared(id), Op::Param, true);
        self.params.insert(id.0, v);
        v
    }

    /// `a · b` for `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// Adds a `[n]` bias to every row of a `[m, n]` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let x = self.value(a);
        let b = self.value(bias);
        let n = x.cols();
        assert_eq!(b.len(), n, "bias width");
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bb) in row.iter_mut().zip(b.data()) {
                *o += bb;
            }
        }
        let ng = self.ng(&[a, bias]);
        self.push(out, Op::AddBias(a, bias), ng)
    }

    /// `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_bias(y, b)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise shapes");
        Tensor::from_vec(x.shape(), x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |p, q| p + q);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |p, q| p - q);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |p, q| p * q);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.ng(&[a]);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| gelu(x).0);
        let ng = self.ng(&[a]);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        let ng = self.ng(&[a]);
        self.push(out, Op::Silu(a), ng)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let out = self.value(a).map(T::sin);
        let ng = self.ng(&[a]);
        self.push(out, Op::Sin(a), ng)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let out = self.value(a).map(T::cos);
        let ng = self.ng(&[a]);
        self.push(out, Op::Cos(a), ng)
    }

    /// Concatenation along the leading axis; trailing dims must agree.
    pub fn concat0(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            assert_eq!(&t.shape()[1..], &tail[..], "concat0 trailing dims");
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let ng = self.ng(parts);
        self.push(Tensor::from_vec(&shape, data), Op::Concat0(parts.to_vec()), ng)
    }

    /// Column-wise concatenation of 2-D tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(&[rows, total]);
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = self.value(p);
            assert_eq!(t.rows(), rows, "concat_cols row count");
            for r in 0..rows {
                out.data_mut()[r * total + off..r * total + off + w].copy_from_slice(t.row(r));
            }
            off += w;
        }
        let ng = self.ng(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Rows `[start, start + len)` of a 2-D tensor.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        let c = t.cols();
        assert!(start + len <= t.rows());
        let out = Tensor::from_vec(&[len, c], t.data()[start * c..(start + len) * c].to_vec());
        let ng = self.ng(&[a]);
        self.push(out, Op::SliceRows(a, start), ng)
    }

    /// Zeroes the rows whose mask entry is `false`.
    pub fn mask_rows(&mut self, a: Var, mask: &[bool]) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.rows(), mask.len());
        for (r, &keep) in mask.iter().enumerate() {
            if !keep {
                out.row_mut(r).iter_mut().for_each(|x| *x = T::zero());
            }
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::MaskRows(a, mask.to_vec()), ng)
    }

    /// Per-row normalization with affine `[d]` gain and offset.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let t = self.value(x);
        let d = t.cols();
        let rows = t.rows();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); t.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = Tensor::zeros(t.shape());
        let eps = T::of(NORM_EPS);
        let dn = T::of(d as f64);
        for r in 0..rows {
            let row = t.row(r);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = (var + eps).sqrt().recip();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out.data_mut()[r * d + j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(&[x, gamma, beta]);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, ng)
    }

    /// Group normalization of a `[C, H, W]` map with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let t = self.value(x);
        let c = t.shape()[0];
        assert!(groups > 0 && c % groups == 0, "channels {c} not divisible by {groups} groups");
        let hw = t.len() / c;
        let cpg = c / groups;
        let n = cpg * hw;
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); t.len()];
        let mut rstd = vec![T::zero(); groups];
        let mut out = Tensor::zeros(t.shape());
        let eps = T::of(NORM_EPS);
        let nn = T::of(n as f64);
        for gi in 0..groups {
            let seg = &t.data()[gi * n..(gi + 1) * n];
            let mean = seg.iter().copied().sum::<T>() / nn;
            let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nn;
            let rs = (var + eps).sqrt().recip();
            rstd[gi] = rs;
            for (i, &v) in seg.iter().enumerate() {
                let ch = gi * cpg + i / hw;
                let h = (v - mean) * rs;
                xhat[gi * n + i] = h;
                out.data_mut()[gi * n + i] = h * g[ch] + b[ch];
            }
        }
        let ng = self.ng(&[x, gamma, beta]);
        self.push(out, Op::GroupNorm { x, gamma, beta, groups, xhat, rstd }, ng)
    }

    /// 3x3 convolution with zero padding 1: `[Cin, H, W]` -> `[Cout, H', W']`,
    /// weights `[Cout, Cin, 3, 3]`, bias `[Cout]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Var {
        let t = self.value(x);
        let (cin, h, wd) = dims3(t);
        let wt = self.value(w);
        let cout = wt.shape()[0];
        assert_eq!(wt.shape(), &[cout, cin, 3, 3], "conv weight shape");
        let (ho, wo) = ((h - 1) / stride + 1, (wd - 1) / stride + 1);
        let cols = im2col(t.data(), cin, h, wd, stride, ho, wo);
        let hw = ho * wo;
        let mut out = Tensor::zeros(&[cout, ho, wo]);
        let bias = self.value(b).data();
        for (co, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
            chunk.iter_mut().for_each(|v| *v = bias[co]);
        }
        let k = cin * 9;
        T::gemm(cout, k, hw, T::one(), wt.data(), k as isize, 1, &cols, hw as isize, 1, T::one(), out.data_mut(), hw as isize, 1);
        let ng = self.ng(&[x, w, b]);
        self.push(out, Op::Conv2d { x, w, b, stride, cols }, ng)
    }

    /// Nearest-neighbour 2x upsampling of a `[C, H, W]` map.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (c, h, w) = dims3(t);
        let mut out = Tensor::zeros(&[c, 2 * h, 2 * w]);
        let od = out.data_mut();
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    od[(ch * 2 * h + y) * 2 * w + xx] = t.data()[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::Upsample2(x), ng)
    }

    /// Samples a `[C, H, W]` map at `[N, 2]` pixel positions `(u, v)`
    /// (column, row; pixel centres on integers). Rows with `mask == false`
    /// or outside `[0, W-1] x [0, H-1]` are zero. Output `[N, C]`.
    pub fn bilinear(&mut self, feat: Var, uv: Var, mask: &[bool]) -> Var {
        let f = self.value(feat);
        let (c, h, w) = dims3(f);
        let p = self.value(uv);
        let n = p.rows();
        assert_eq!(p.cols(), 2);
        assert_eq!(mask.len(), n);
        let mut out = Tensor::zeros(&[n, c]);
        for i in 0..n {
            if !mask[i] {
                continue;
            }
            if let Some(s) = BilinearStencil::new(p.data()[2 * i], p.data()[2 * i + 1], h, w) {
                let row = out.row_mut(i);
                for (ch, o) in row.iter_mut().enumerate() {
                    *o = s.eval(&f.data()[ch * h * w..(ch + 1) * h * w], w);
                }
            }
        }
        let ng = self.ng(&[feat, uv]);
        self.push(out, Op::Bilinear { feat, uv, mask: mask.to_vec() }, ng)
    }

    /// Multi-head scaled dot-product attention over already projected
    /// `[n, d]` queries, keys and values. Keys with `key_mask == false` get
    /// exactly zero weight; they are dropped before the softmax.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, key_mask: &[bool]) -> Var {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = (qt.rows(), qt.cols());
        assert_eq!(kt.shape(), qt.shape());
        assert_eq!(vt.shape(), qt.shape());
        assert_eq!(key_mask.len(), n);
        assert!(d % heads == 0, "model width {d} not divisible by {heads} heads");
        let keys: Vec<usize> = (0..n).filter(|&i| key_mask[i]).collect();
        let nk = keys.len();
        let ku = gather_rows(kt, &keys);
        let vu = gather_rows(vt, &keys);
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::zero(); heads * n * nk];
        let mut out = Tensor::zeros(&[n, d]);
        for hd in 0..heads {
            let p = &mut probs[hd * n * nk..(hd + 1) * n * nk];
            // scores = Q_h K_hᵀ
            T::gemm(n, dh, nk, scale, &qt.data()[hd * dh..], d as isize, 1, &ku[hd * dh..], 1, d as isize, T::zero(), p, nk as isize, 1);
            for row in p.chunks_mut(nk.max(1)) {
                softmax_in_place(row);
            }
            T::gemm(n, nk, dh, T::one(), p, nk as isize, 1, &vu[hd * dh..], d as isize, 1, T::zero(), &mut out.data_mut()[hd * dh..], d as isize, 1);
        }
        let ng = self.ng(&[q, k, v]);
        self.push(out, Op::Attention { q, k, v, heads, keys, probs }, ng)
    }

    /// Full `[heads, n, n]` attention weights of an attention node, with
    /// masked key columns filled by exact zeros.
    pub fn attention_weights(&self, node: Var) -> Option<Tensor<T>> {
        match &self.nodes[node.0].op {
            Op::Attention { heads, keys, probs, .. } => {
                let n = self.nodes[node.0].value.rows();
                let nk = keys.len();
                let mut full = Tensor::zeros(&[*heads, n, n]);
                for h in 0..*heads {
                    for i in 0..n {
                        for (j, &key) in keys.iter().enumerate() {
                            full.data_mut()[(h * n + i) * n + key] = probs[(h * n + i) * nk + j];
                        }
                    }
                }
                Some(full)
            }
            _ => None,
        }
    }

    /// Applies a row-wise map whose values and Jacobians were computed
    /// outside the tape: `values` is `[R, out]`, `jac` is `R * out * in`
    /// entries laid out `[r][o][i]`.
    pub fn row_map(&mut self, x: Var, values: Tensor<T>, jac: Vec<T>) -> Var {
        let (r, i) = (self.value(x).rows(), self.value(x).cols());
        assert_eq!(values.rows(), r);
        assert_eq!(jac.len(), r * values.cols() * i);
        let ng = self.ng(&[x]);
        self.push(values, Op::RowJacobian { x, jac }, ng)
    }

    /// Mean over rows with `mask == true` of `sqrt(|pred_r - target_r|² + eps)`;
    /// zero when no row counts.
    pub fn smooth_norm_mean(&mut self, pred: Var, target: &[T], mask: &[bool], eps: T) -> Var {
        let p = self.value(pred);
        let k = p.cols();
        assert_eq!(target.len(), p.len());
        assert_eq!(mask.len(), p.rows());
        let mut sum = T::zero();
        let mut cnt = 0usize;
        for r in 0..p.rows() {
            if !mask[r] {
                continue;
            }
            let sq: T = (0..k).map(|j| (p.data()[r * k + j] - target[r * k + j]).powi(2)).sum();
            sum += (sq + eps).sqrt();
            cnt += 1;
        }
        let val = if cnt == 0 { T::zero() } else { sum / T::of(cnt as f64) };
        let ng = self.ng(&[pred]);
        self.push(Tensor::scalar(val), Op::SmoothNormMean { pred, target: target.to_vec(), mask: mask.to_vec(), eps }, ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), T::one()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.wants(*a) {
                    let mut da = Tensor::zeros(av.shape());
                    T::gemm(m, n, k, T::one(), g.data(), n as isize, 1, bv.data(), 1, n as isize, T::zero(), da.data_mut(), k as isize, 1);
                    self.acc(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = Tensor::zeros(bv.shape());
                    T::gemm(k, m, n, T::one(), av.data(), 1, k as isize, g.data(), n as isize, 1, T::zero(), db.data_mut(), n as isize, 1);
                    self.acc(grads, *b, db);
                }
            }
            Op::AddBias(a, bias) => {
                self.acc(grads, *a, g.clone());
                if self.wants(*bias) {
                    let n = g.cols();
                    let mut db = Tensor::zeros(self.shape(*bias));
                    for row in g.data().chunks(n) {
                        for (d, &x) in db.data_mut().iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    self.acc(grads, *bias, db);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let bv = self.value(*b);
                    self.acc(grads, *a, Tensor::from_vec(g.shape(), g.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect()));
                }
                if self.wants(*b) {
                    let av = self.value(*a);
                    self.acc(grads, *b, Tensor::from_vec(g.shape(), g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect()));
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.map(|x| x * *s)),
            Op::Gelu(a) => self.acc(grads, *a, elementwise_grad(g, self.value(*a), |x| gelu(x).1)),
            Op::Silu(a) => self.acc(
                grads,
                *a,
                elementwise_grad(g, self.value(*a), |x| {
                    let s = sigmoid(x);
                    s * (T::one() + x * (T::one() - s))
                }),
            ),
            Op::Sin(a) => self.acc(grads, *a, elementwise_grad(g, self.value(*a), T::cos)),
            Op::Cos(a) => self.acc(grads, *a, elementwise_grad(g, self.value(*a), |x| -x.sin())),
            Op::Concat0(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.wants(p) {
                        self.acc(grads, p, Tensor::from_vec(self.shape(p), g.data()[off..off + len].to_vec()));
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut off = 0;
                for &p in parts {
                    let (rows, w) = (self.value(p).rows(), self.value(p).cols());
                    if self.wants(p) {
                        let mut d = Tensor::zeros(self.shape(p));
                        for r in 0..rows {
                            d.row_mut(r).copy_from_slice(&g.data()[r * total + off..r * total + off + w]);
                        }
                        self.acc(grads, p, d);
                    }
                    off += w;
                }
            }
            Op::SliceRows(a, start) => {
                let mut d = Tensor::zeros(self.shape(*a));
                let c = g.cols();
                d.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                self.acc(grads, *a, d);
            }
            Op::MaskRows(a, mask) => {
                let mut d = g.clone();
                for (r, &keep) in mask.iter().enumerate() {
                    if !keep {
                        d.row_mut(r).iter_mut().for_each(|x| *x = T::zero());
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = g.cols();
                let gm = self.value(*gamma).data();
                let mut dg = Tensor::zeros(&[d]);
                let mut db = Tensor::zeros(&[d]);
                let mut dx = Tensor::zeros(g.shape());
                let dn = T::of(d as f64);
                for r in 0..g.rows() {
                    let gr = g.row(r);
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..d {
                        dg.data_mut()[j] += gr[j] * xh[j];
                        db.data_mut()[j] += gr[j];
                        let dxh = gr[j] * gm[j];
                        s1 += dxh;
                        s2 += dxh * xh[j];
                    }
                    let out = dx.row_mut(r);
                    for j in 0..d {
                        let dxh = gr[j] * gm[j];
                        out[j] = rstd[r] / dn * (dn * dxh - s1 - xh[j] * s2);
                    }
                }
                self.acc(grads, *x, dx);
                self.acc(grads, *gamma, dg);
                self.acc(grads, *beta, db);
            }
            Op::GroupNorm { x, gamma, beta, groups, xhat, rstd } => {
                let c = g.shape()[0];
                let hw = g.len() / c;
                let cpg = c / groups;
                let n = cpg * hw;
                let gm = self.value(*gamma).data();
                let mut dg = Tensor::zeros(&[c]);
                let mut db = Tensor::zeros(&[c]);
                let mut dx = Tensor::zeros(g.shape());
                let nn = T::of(n as f64);
                for gi in 0..*groups {
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for i in 0..n {
                        let idx = gi * n + i;
                        let ch = gi * cpg + i / hw;
                        let gv = g.data()[idx];
                        dg.data_mut()[ch] += gv * xhat[idx];
                        db.data_mut()[ch] += gv;
                        let dxh = gv * gm[ch];
                        s1 += dxh;
                        s2 += dxh * xhat[idx];
                    }
                    for i in 0..n {
                        let idx = gi * n + i;
                        let ch = gi * cpg + i / hw;
                        let dxh = g.data()[idx] * gm[ch];
                        dx.data_mut()[idx] = rstd[gi] / nn * (nn * dxh - s1 - xhat[idx] * s2);
                    }
                }
                self.acc(grads, *x, dx);
                self.acc(grads, *gamma, dg);
                self.acc(grads, *beta, db);
            }
            Op::Conv2d { x, w, b, stride, cols } => {
                let (cin, h, wd) = dims3(self.value(*x));
                let (cout, ho, wo) = dims3(g);
                let hw = ho * wo;
                let k = cin * 9;
                if self.wants(*w) {
                    let mut dw = Tensor::zeros(self.shape(*w));
                    T::gemm(cout, hw, k, T::one(), g.data(), hw as isize, 1, cols, 1, hw as isize, T::zero(), dw.data_mut(), k as isize, 1);
                    self.acc(grads, *w, dw);
                }
                if self.wants(*b) {
                    let db = Tensor::from_vec(&[cout], g.data().chunks(hw).map(|c| c.iter().copied().sum()).collect());
                    self.acc(grads, *b, db);
                }
                if self.wants(*x) {
                    let wt = self.value(*w);
                    let mut dcols = vec![T::zero(); k * hw];
                    T::gemm(k, cout, hw, T::one(), wt.data(), 1, k as isize, g.data(), hw as isize, 1, T::zero(), &mut dcols, hw as isize, 1);
                    let dx = col2im(&dcols, cin, h, wd, *stride, ho, wo);
                    self.acc(grads, *x, Tensor::from_vec(&[cin, h, wd], dx));
                }
            }
            Op::Upsample2(x) => {
                let (c, h, w) = dims3(self.value(*x));
                let mut dx = Tensor::zeros(&[c, h, w]);
                for ch in 0..c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dx.data_mut()[(ch * h + y / 2) * w + xx / 2] += g.data()[(ch * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::Bilinear { feat, uv, mask } => {
                let f = self.value(*feat);
                let (c, h, w) = dims3(f);
                let p = self.value(*uv);
                let mut df = self.wants(*feat).then(|| Tensor::zeros(f.shape()));
                let mut duv = self.wants(*uv).then(|| Tensor::zeros(p.shape()));
                for i in 0..p.rows() {
                    if !mask[i] {
                        continue;
                    }
                    let Some(s) = BilinearStencil::new(p.data()[2 * i], p.data()[2 * i + 1], h, w) else { continue };
                    let gr = g.row(i);
                    for ch in 0..c {
                        let plane = ch * h * w;
                        if let Some(df) = df.as_mut() {
                            s.scatter(&mut df.data_mut()[plane..plane + h * w], w, gr[ch]);
                        }
                        if let Some(duv) = duv.as_mut() {
                            let (du, dv) = s.grad_uv(&f.data()[plane..plane + h * w], w);
                            duv.data_mut()[2 * i] += gr[ch] * du;
                            duv.data_mut()[2 * i + 1] += gr[ch] * dv;
                        }
                    }
                }
                if let Some(df) = df {
                    self.acc(grads, *feat, df);
                }
                if let Some(duv) = duv {
                    self.acc(grads, *uv, duv);
                }
            }
            Op::Attention { q, k, v, heads, keys, probs } => {
                let (qt, kt, vt) = (self.value(*q), self.value(*k), self.value(*v));
                let (n, d) = (qt.rows(), qt.cols());
                let nk = keys.len();
                let dh = d / heads;
                let scale = T::of(1.0 / (dh as f64).sqrt());
                let ku = gather_rows(kt, keys);
                let vu = gather_rows(vt, keys);
                let mut dq = Tensor::zeros(&[n, d]);
                let mut dku = vec![T::zero(); nk * d];
                let mut dvu = vec![T::zero(); nk * d];
                let mut dp = vec![T::zero(); n * nk];
                for hd in 0..*heads {
                    let p = &probs[hd * n * nk..(hd + 1) * n * nk];
                    let go = &g.data()[hd * dh..];
                    // dV_h = Pᵀ dO_h
                    T::gemm(nk, n, dh, T::one(), p, 1, nk as isize, go, d as isize, 1, T::one(), &mut dvu[hd * dh..], d as isize, 1);
                    // dP = dO_h V_hᵀ
                    T::gemm(n, dh, nk, T::one(), go, d as isize, 1, &vu[hd * dh..], 1, d as isize, T::zero(), &mut dp, nk as isize, 1);
                    for r in 0..n {
                        let pr = &p[r * nk..(r + 1) * nk];
                        let dr = &mut dp[r * nk..(r + 1) * nk];
                        let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                        for (x, &pp) in dr.iter_mut().zip(pr) {
                            *x = pp * (*x - dot) * scale;
                        }
                    }
                    // dQ_h = dS K_h ; dK_h = dSᵀ Q_h
                    T::gemm(n, nk, dh, T::one(), &dp, nk as isize, 1, &ku[hd * dh..], d as isize, 1, T::zero(), &mut dq.data_mut()[hd * dh..], d as isize, 1);
                    T::gemm(nk, n, dh, T::one(), &dp, 1, nk as isize, &qt.data()[hd * dh..], d as isize, 1, T::one(), &mut dku[hd * dh..], d as isize, 1);
                }
                self.acc(grads, *q, dq);
                if self.wants(*k) {
                    self.acc(grads, *k, scatter_rows(&dku, keys, n, d));
                }
                if self.wants(*v) {
                    self.acc(grads, *v, scatter_rows(&dvu, keys, n, d));
                }
            }
            Op::RowJacobian { x, jac } => {
                let xt = self.value(*x);
                let (r, ni, no) = (xt.rows(), xt.cols(), g.cols());
                let mut dx = Tensor::zeros(xt.shape());
                for row in 0..r {
                    for o in 0..no {
                        let go = g.data()[row * no + o];
                        for i in 0..ni {
                            dx.data_mut()[row * ni + i] += go * jac[(row * no + o) * ni + i];
                        }
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::SmoothNormMean { pred, target, mask, eps } => {
                let p = self.value(*pred);
                let k = p.cols();
                let cnt = mask.iter().filter(|&&m| m).count();
                let mut dp = Tensor::zeros(p.shape());
                if cnt > 0 {
                    let w = g.data()[0] / T::of(cnt as f64);
                    for r in 0..p.rows() {
                        if !mask[r] {
                            continue;
                        }
                        let diff: Vec<T> = (0..k).map(|j| p.data()[r * k + j] - target[r * k + j]).collect();
                        let norm = (diff.iter().map(|&x| x * x).sum::<T>() + *eps).sqrt();
                        for j in 0..k {
                            dp.data_mut()[r * k + j] = w * diff[j] / norm;
                        }
                    }
                }
                self.acc(grads, *pred, dp);
            }
            Op::Sum(a) => {
                let s = g.data()[0];
                self.acc(grads, *a, Tensor::full(self.shape(*a), s));
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Adds every parameter gradient into `acc`, indexed like the store.
    pub fn accumulate_params(&self, graph: &Graph<T>, acc: &mut [Tensor<T>]) {
        for (&pid, &var) in &graph.params {
            if let Some(g) = &self.grads[var.0] {
                acc[pid].add_assign(g);
            }
        }
    }
}

fn dims3<T: Scalar>(t: &Tensor<T>) -> (usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 3, "expected a [C, H, W] tensor, got {s:?}");
    (s[0], s[1], s[2])
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// tanh-approximated GELU and its derivative.
#[inline]
fn gelu<T: Scalar>(x: T) -> (T, T) {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let y = half * x * (T::one() + t);
    let dinner = c * (T::one() + T::of(3.0) * a * x * x);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * dinner;
    (y, dy)
}

fn elementwise_grad<T: Scalar>(g: &Tensor<T>, x: &Tensor<T>, d: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::from_vec(g.shape(), g.data().iter().zip(x.data()).map(|(&gg, &xx)| gg * d(xx)).collect())
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    if row.is_empty() {
        return;
    }
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}

fn gather_rows<T: Scalar>(t: &Tensor<T>, idx: &[usize]) -> Vec<T> {
    let c = t.cols();
    let mut out = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        out.extend_from_slice(t.row(i));
    }
    out
}

fn scatter_rows<T: Scalar>(src: &[T], idx: &[usize], n: usize, d: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(&[n, d]);
    for (j, &i) in idx.iter().enumerate() {
        out.row_mut(i).copy_from_slice(&src[j * d..(j + 1) * d]);
    }
    out
}

fn im2col<T: Scalar>(x: &[T], cin: usize, h: usize, w: usize, stride: usize, ho: usize, wo: usize) -> Vec<T> {
    let hw = ho * wo;
    let mut cols = vec![T::zero(); cin * 9 * hw];
    for c in 0..cin {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let dst = &mut cols[((c * 9) + ky * 3 + kx) * hw..][..hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], cin: usize, h: usize, w: usize, stride: usize, ho: usize, wo: usize) -> Vec<T> {
    let hw = ho * wo;
    let mut x = vec![T::zero(); cin * h * w];
    for c in 0..cin {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let src = &cols[((c * 9) + ky * 3 + kx) * hw..][..hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Four-neighbour interpolation weights of one query point.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BilinearStencil<T> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    a: T,
    b: T,
}

impl<T: Scalar> BilinearStencil<T> {
    /// `None` when `(u, v)` lies outside `[0, w-1] x [0, h-1]` or is not finite.
    pub(crate) fn new(u: T, v: T, h: usize, w: usize) -> Option<Self> {
        if !(u.is_finite() && v.is_finite()) || h == 0 || w == 0 {
            return None;
        }
        let wmax = T::of((w - 1) as f64);
        let hmax = T::of((h - 1) as f64);
        if u < T::zero() || v < T::zero() || u > wmax || v > hmax {
            return None;
        }
        let (x0, a) = cell(u, w);
        let (y0, b) = cell(v, h);
        Some(Self { x0, x1: (x0 + 1).min(w - 1), y0, y1: (y0 + 1).min(h - 1), a, b })
    }

    #[inline]
    pub(crate) fn eval(&self, plane: &[T], w: usize) -> T {
        let one = T::one();
        let f00 = plane[self.y0 * w + self.x0];
        let f01 = plane[self.y0 * w + self.x1];
        let f10 = plane[self.y1 * w + self.x0];
        let f11 = plane[self.y1 * w + self.x1];
        (one - self.a) * (one - self.b) * f00 + self.a * (one - self.b) * f01 + (one - self.a) * self.b * f10 + self.a * self.b * f11
    }

    /// [`Self::eval`] on channel `ch` of an interleaved `[H, W, stride]` image.
    #[inline]
    pub(crate) fn eval_strided(&self, data: &[T], w: usize, stride: usize, ch: usize) -> T {
        let one = T::one();
        let at = |y: usize, x: usize| data[(y * w + x) * stride + ch];
        (one - self.a) * (one - self.b) * at(self.y0, self.x0)
            + self.a * (one - self.b) * at(self.y0, self.x1)
            + (one - self.a) * self.b * at(self.y1, self.x0)
            + self.a * self.b * at(self.y1, self.x1)
    }

    fn scatter(&self, plane: &mut [T], w: usize, g: T) {
        let one = T::one();
        plane[self.y0 * w + self.x0] += g * (one - self.a) * (one - self.b);
        plane[self.y0 * w + self.x1] += g * self.a * (one - self.b);
        plane[self.y1 * w + self.x0] += g * (one - self.a) * self.b;
        plane[self.y1 * w + self.x1] += g * self.a * self.b;
    }

    fn grad_uv(&self, plane: &[T], w: usize) -> (T, T) {
        let one = T::one();
        let f00 = plane[self.y0 * w + self.x0];
        let f01 = plane[self.y0 * w + self.x1];
        let f10 = plane[self.y1 * w + self.x0];
        let f11 = plane[self.y1 * w + self.x1];
        let du = (one - self.b) * (f01 - f00) + self.b * (f11 - f10);
        let dv = (one - self.a) * (f10 - f00) + self.a * (f11 - f01);
        (du, dv)
    }
}

/// Integer cell and fractional offset of a coordinate in `[0, n-1]`; the last
/// sample maps to the upper corner of the final cell.
fn cell<T: Scalar>(x: T, n: usize) -> (usize, T) {
    if n == 1 {
        return (0, T::zero());
    }
    let mut i = x.floor().to_usize().unwrap_or(0);
    if i >= n - 1 {
        i = n - 2;
    }
    (i, x - T::of(i as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, max_rel_err};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Checks d(sum(w ⊙ f(x)))/dx against central differences for one unary builder.
    fn check_unary(shape: &[usize], build: impl Fn(&mut Graph<f64>, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = rand_tensor(&mut rng, shape);
        let probe = {
            let mut g = Graph::new();
            let x = g.constant(x0.clone());
            let y = build(&mut g, x);
            rand_tensor(&mut rng, g.shape(y))
        };
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
        let analytic = grads.get(xv).unwrap().clone();
        let numeric = central_difference(&eval, &x0, 1e-5);
        let err = max_rel_err(analytic.data(), numeric.data(), 1e-7);
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn elementwise_ops_gradients() {
        check_unary(&[3, 4], |g, x| g.gelu(x));
        check_unary(&[3, 4], |g, x| g.silu(x));
        check_unary(&[3, 4], |g, x| g.sin(x));
        check_unary(&[3, 4], |g, x| g.cos(x));
        check_unary(&[3, 4], |g, x| {
            let y = g.scale(x, 2.5);
            g.mul(y, x)
        });
    }

    #[test]
    fn matmul_and_structure_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = rand_tensor(&mut rng, &[4, 5]);
        let b = rand_tensor(&mut rng, &[5]);
        check_unary(&[3, 4], move |g, x| {
            let wv = g.constant(w.clone());
            let bv = g.constant(b.clone());
            g.linear(x, wv, bv)
        });
        check_unary(&[4, 3], |g, x| {
            let a = g.slice_rows(x, 1, 2);
            let b = g.concat_cols(&[x, x]);
            let c = g.slice_rows(b, 0, 2);
            let d = g.concat_cols(&[a, c]);
            g.mask_rows(d, &[true, false])
        });
        check_unary(&[2, 3, 3], |g, x| {
            let y = g.concat0(&[x, x]);
            g.upsample2(y)
        });
    }

    #[test]
    fn norm_gradients() {
        let gamma = Tensor::from_vec(&[4], vec![1.2, -0.3, 0.7, 2.0]);
        let beta = Tensor::from_vec(&[4], vec![0.1, 0.2, -0.4, 0.0]);
        let (g1, b1) = (gamma.clone(), beta.clone());
        check_unary(&[3, 4], move |g, x| {
            let gv = g.constant(g1.clone());
            let bv = g.constant(b1.clone());
            g.layer_norm(x, gv, bv)
        });
        check_unary(&[4, 3, 2], move |g, x| {
            let gv = g.constant(gamma.clone());
            let bv = g.constant(beta.clone());
            g.group_norm(x, gv, bv, 2)
        });
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        for stride in [1, 2] {
            let (w, b) = (w.clone(), b.clone());
            check_unary(&[2, 5, 6], move |g, x| {
                let wv = g.constant(w.clone());
                let bv = g.constant(b.clone());
                g.conv3x3(x, wv, bv, stride)
            });
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[2, 5, 4]);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv3x3(xv, wv, bv, 2);
        let out = g.value(y);
        assert_eq!(out.shape(), &[3, 3, 2]);
        for co in 0..3 {
            for oy in 0..3 {
                for ox in 0..2 {
                    let mut s = b.data()[co];
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if (0..5).contains(&iy) && (0..4).contains(&ix) {
                                    s += w.data()[((co * 2 + ci) * 3 + ky) * 3 + kx] * x.data()[(ci * 5 + iy as usize) * 4 + ix as usize];
                                }
                            }
                        }
                    }
                    assert!((out.data()[(co * 3 + oy) * 2 + ox] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn attention_gradients_and_mask() {
        let mask = vec![true, false, true, true, false];
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let k = rand_tensor(&mut rng, &[5, 4]);
        let v = rand_tensor(&mut rng, &[5, 4]);
        let (k1, v1, m1) = (k.clone(), v.clone(), mask.clone());
        check_unary(&[5, 4], move |g, x| {
            let kv = g.constant(k1.clone());
            let vv = g.constant(v1.clone());
            g.attention(x, kv, vv, 2, &m1)
        });
        let m2 = mask.clone();
        check_unary(&[5, 4], move |g, x| {
            let qv = g.constant(k.clone());
            let vv = g.constant(v.clone());
            let a = g.attention(qv, x, x, 2, &m2);
            g.attention(a, x, vv, 1, &m2)
        });
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(&mut rng, &[5, 4]));
        let a = g.attention(x, x, x, 2, &mask);
        let w = g.attention_weights(a).unwrap();
        for h in 0..2 {
            for i in 0..5 {
                let row = &w.data()[(h * 5 + i) * 5..(h * 5 + i + 1) * 5];
                assert_eq!(row[1], 0.0);
                assert_eq!(row[4], 0.0);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn smooth_norm_gradient() {
        let target: Vec<f64> = vec![0.1, -0.2, 0.3, 0.5, 0.0, 0.2, -0.1, 0.4, 0.9];
        check_unary(&[3, 3], move |g, x| {
            let l = g.smooth_norm_mean(x, &target, &[true, false, true], 1e-8);
            g.scale(l, 3.0)
        });
    }
}

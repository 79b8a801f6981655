//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Parameter
//! nodes copy their value out of a [`ParamStore`]; gradients flow only into
//! nodes that transitively depend on a trainable parameter or on an input
//! created with [`Graph::input_with_grad`].

use std::collections::BTreeMap;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Candidate-set grouping for [`Graph::grouped_softmax_ce`]: the logits
/// `start..start + len` form one softmax, and `target` indexes the correct
/// entry within the group.
#[derive(Clone, Copy, Debug)]
pub struct Group {
    pub start: usize,
    pub len: usize,
    pub target: usize,
}

/// Precomputed bilinear sampling taps for RoI pooling. Output element
/// `(r, c, bin)` reads `sum(w * feat[batch[r], c, idx])` over the taps of
/// `bin`.
#[derive(Clone, Debug)]
struct RoiPlan {
    batch: Vec<usize>,
    bins: usize,
    offsets: Vec<usize>,
    taps: Vec<(u32, f32)>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Linear { x: Var, w: Var, b: Option<Var> },
    Relu(Var),
    Add(Var, Var),
    Scale(Var, f32),
    ConcatCols(Var, Var),
    GatherRows(Var, Vec<usize>),
    GatherFlat(Var, Vec<usize>),
    Reshape(Var),
    GlobalAvgPool(Var),
    AvgPool(Var, usize),
    Upsample2x(Var),
    RoiAlign { feat: Var, plan: RoiPlan },
    GroupedSoftmaxCe { logits: Var, groups: Vec<Group>, probs: Vec<f32> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f32> },
    BceWithLogits { logits: Var, targets: Vec<f32> },
    SmoothL1 { pred: Var, target: Vec<f32>, beta: f32, norm: f32 },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    params: BTreeMap<ParamId, Tensor>,
    nodes: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn var(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    /// Sums gradients from another backward pass into this one.
    pub fn accumulate(&mut self, other: Gradients) {
        for (id, g) in other.params {
            match self.params.get_mut(&id) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    self.params.insert(id, g);
                }
            }
        }
    }

    pub fn scale(&mut self, s: f32) {
        for g in self.params.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// An input whose gradient is retained by [`Graph::backward`].
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let trainable = store.is_trainable(id);
        self.push(store.value(id).clone(), Op::Param(id), trainable)
    }

    /// 2-D convolution, NCHW input, OIHW weight.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (xs, ws) = (self.value(x).shape().to_vec(), self.value(w).shape().to_vec());
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW, got {xs:?}");
        assert_eq!(ws.len(), 4, "conv2d weight must be OIHW, got {ws:?}");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch {xs:?} vs {ws:?}");
        let geom = ConvGeom::new(&xs, &ws, stride, pad);
        let mut out = vec![0.0f32; geom.n * geom.o * geom.out_hw()];
        let mut cols = vec![0.0f32; geom.col_rows() * geom.out_hw()];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for n in 0..geom.n {
            let xn = &xv[n * geom.in_chw()..(n + 1) * geom.in_chw()];
            let on = &mut out[n * geom.o * geom.out_hw()..(n + 1) * geom.o * geom.out_hw()];
            if geom.is_pointwise() {
                gemm(geom.o, geom.c, geom.out_hw(), wv, false, xn, false, on, false);
            } else {
                geom.im2col(xn, &mut cols);
                gemm(geom.o, geom.col_rows(), geom.out_hw(), wv, false, &cols, false, on, false);
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for (o, chunk) in on.chunks_mut(geom.out_hw()).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += bv[o]);
                }
            }
        }
        let needs = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        let shape = vec![geom.n, geom.o, geom.oh, geom.ow];
        self.push(Tensor::new(shape, out), Op::Conv2d { x, w, b, stride, pad }, needs)
    }

    /// `x · wᵀ + b` with `x: [N, I]`, `w: [O, I]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xs, ws) = (self.value(x).shape().to_vec(), self.value(w).shape().to_vec());
        assert_eq!(xs.len(), 2, "linear input must be [N, I], got {xs:?}");
        assert_eq!(xs[1], ws[1], "linear dim mismatch {xs:?} vs {ws:?}");
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0f32; n * o];
        gemm(n, i, o, self.value(x).data(), false, self.value(w).data(), true, &mut out, false);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(o) {
                row.iter_mut().zip(bv).for_each(|(v, b)| *v += b);
            }
        }
        let needs = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(Tensor::new([n, o], out), Op::Linear { x, w, b }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.max(0.0)).collect();
        let out = Tensor::new(t.shape().to_vec(), data);
        let needs = self.ng(x);
        self.push(out, Op::Relu(x), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data);
        let needs = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), needs)
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * s).collect();
        let out = Tensor::new(t.shape().to_vec(), data);
        let needs = self.ng(x);
        self.push(out, Op::Scale(x, s), needs)
    }

    /// `[N, A] ++ [N, B] -> [N, A + B]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.rank(), 2);
        assert_eq!(tb.rank(), 2);
        assert_eq!(ta.dim(0), tb.dim(0), "concat row mismatch");
        let (n, ca, cb) = (ta.dim(0), ta.dim(1), tb.dim(1));
        let mut data = Vec::with_capacity(n * (ca + cb));
        for r in 0..n {
            data.extend_from_slice(ta.row(r));
            data.extend_from_slice(tb.row(r));
        }
        let needs = self.ng(a) || self.ng(b);
        self.push(Tensor::new([n, ca + cb], data), Op::ConcatCols(a, b), needs)
    }

    /// Selects rows of `x` (viewed as `[dim0, rest]`); indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let t = self.value(x);
        let mut shape = t.shape().to_vec();
        let rows = shape[0];
        shape[0] = idx.len();
        let mut data = Vec::with_capacity(idx.len() * t.numel() / rows.max(1));
        for &i in idx {
            assert!(i < rows, "gather_rows index {i} out of {rows}");
            data.extend_from_slice(t.row(i));
        }
        let needs = self.ng(x);
        self.push(Tensor::new(shape, data), Op::GatherRows(x, idx.to_vec()), needs)
    }

    /// Selects individual elements of the flattened tensor into a 1-D result.
    pub fn gather_flat(&mut self, x: Var, idx: &[usize]) -> Var {
        let t = self.value(x).data();
        let data = idx.iter().map(|&i| t[i]).collect();
        let needs = self.ng(x);
        self.push(Tensor::new([idx.len()], data), Op::GatherFlat(x, idx.to_vec()), needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape.to_vec());
        let needs = self.ng(x);
        self.push(out, Op::Reshape(x), needs)
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.shape();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let data = t.data().chunks(hw).map(|ch| ch.iter().sum::<f32>() / hw as f32).collect();
        let needs = self.ng(x);
        self.push(Tensor::new([n, c], data), Op::GlobalAvgPool(x), needs)
    }

    /// Non-overlapping `k × k` mean pooling; trailing rows/columns that do
    /// not fill a window are dropped.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Var {
        let t = self.value(x);
        let s = t.shape().to_vec();
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / k, w / k);
        let inv = 1.0 / (k * k) as f32;
        let mut data = vec![0.0f32; nc * oh * ow];
        let src = t.data();
        for p in 0..nc {
            let plane = &src[p * h * w..(p + 1) * h * w];
            let dst = &mut data[p * oh * ow..(p + 1) * oh * ow];
            for oy in 0..oh {
                for ky in 0..k {
                    let row = &plane[(oy * k + ky) * w..];
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for kx in 0..k {
                            acc += row[ox * k + kx];
                        }
                        dst[oy * ow + ox] += acc;
                    }
                }
            }
            dst.iter_mut().for_each(|v| *v *= inv);
        }
        let needs = self.ng(x);
        self.push(Tensor::new([s[0], s[1], oh, ow], data), Op::AvgPool(x, k), needs)
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.shape().to_vec();
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let mut data = vec![0.0f32; nc * 4 * h * w];
        let src = t.data();
        for p in 0..nc {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    data[p * 4 * h * w + y * 2 * w + xx] = src[p * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let needs = self.ng(x);
        self.push(Tensor::new([s[0], s[1], 2 * h, 2 * w], data), Op::Upsample2x(x), needs)
    }

    /// RoIAlign over an NCHW feature map. Each roi is `(batch, [x1, y1, x2, y2])`
    /// in input-image pixels; `spatial_scale` maps them onto the feature grid.
    /// Each output bin averages `sampling × sampling` bilinear samples.
    pub fn roi_align(
        &mut self,
        feat: Var,
        rois: &[(usize, [f32; 4])],
        out_size: usize,
        spatial_scale: f32,
        sampling: usize,
    ) -> Var {
        let fs = self.value(feat).shape().to_vec();
        let (c, h, w) = (fs[1], fs[2], fs[3]);
        let bins = out_size * out_size;
        let mut plan = RoiPlan {
            batch: Vec::with_capacity(rois.len()),
            bins,
            offsets: Vec::with_capacity(rois.len() * bins + 1),
            taps: Vec::new(),
        };
        plan.offsets.push(0);
        let inv_samples = 1.0 / (sampling * sampling) as f32;
        for &(b, bx) in rois {
            assert!(b < fs[0], "roi batch index out of range");
            plan.batch.push(b);
            let x1 = bx[0] * spatial_scale;
            let y1 = bx[1] * spatial_scale;
            let rw = (bx[2] * spatial_scale - x1).max(1.0);
            let rh = (bx[3] * spatial_scale - y1).max(1.0);
            let (bw, bh) = (rw / out_size as f32, rh / out_size as f32);
            for by in 0..out_size {
                for bxi in 0..out_size {
                    for sy in 0..sampling {
                        let yy = y1 + by as f32 * bh + (sy as f32 + 0.5) * bh / sampling as f32;
                        for sx in 0..sampling {
                            let xx = x1 + bxi as f32 * bw + (sx as f32 + 0.5) * bw / sampling as f32;
                            bilinear_taps(yy, xx, h, w, inv_samples, &mut plan.taps);
                        }
                    }
                    plan.offsets.push(plan.taps.len());
                }
            }
        }
        let src = self.value(feat).data();
        let plane = h * w;
        let mut out = vec![0.0f32; rois.len() * c * bins];
        for (r, &b) in plan.batch.iter().enumerate() {
            for ch in 0..c {
                let fp = &src[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                let dst = &mut out[(r * c + ch) * bins..(r * c + ch + 1) * bins];
                for (bin, d) in dst.iter_mut().enumerate() {
                    let k = r * bins + bin;
                    let taps = &plan.taps[plan.offsets[k]..plan.offsets[k + 1]];
                    *d = taps.iter().map(|&(i, wt)| fp[i as usize] * wt).sum();
                }
            }
        }
        let needs = self.ng(feat);
        let shape = vec![rois.len(), c, out_size, out_size];
        self.push(Tensor::new(shape, out), Op::RoiAlign { feat, plan }, needs)
    }

    /// Mean over groups of `-log softmax(group)[target]`.
    pub fn grouped_softmax_ce(&mut self, logits: Var, groups: &[Group]) -> Var {
        let z = self.value(logits).data();
        let mut probs = vec![0.0f32; z.len()];
        let mut loss = 0.0f64;
        for g in groups {
            assert!(g.len > 0 && g.target < g.len && g.start + g.len <= z.len(), "bad group {g:?}");
            let zs = &z[g.start..g.start + g.len];
            let m = zs.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let sum: f32 = zs.iter().map(|v| (v - m).exp()).sum();
            for (k, v) in zs.iter().enumerate() {
                probs[g.start + k] = (v - m).exp() / sum;
            }
            loss += (sum.ln() + m - zs[g.target]) as f64;
        }
        let loss = if groups.is_empty() { 0.0 } else { loss / groups.len() as f64 };
        let needs = self.ng(logits);
        let op = Op::GroupedSoftmaxCe { logits, groups: groups.to_vec(), probs };
        self.push(Tensor::scalar(loss as f32), op, needs)
    }

    /// Row-wise softmax cross-entropy averaged over rows of `[R, K]` logits.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let t = self.value(logits);
        assert_eq!(t.rank(), 2);
        assert_eq!(t.dim(0), targets.len());
        let k = t.dim(1);
        let mut probs = vec![0.0f32; t.numel()];
        let mut loss = 0.0f64;
        for (r, &y) in targets.iter().enumerate() {
            let z = t.row(r);
            let m = z.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let sum: f32 = z.iter().map(|v| (v - m).exp()).sum();
            for j in 0..k {
                probs[r * k + j] = (z[j] - m).exp() / sum;
            }
            loss += (sum.ln() + m - z[y]) as f64;
        }
        let loss = if targets.is_empty() { 0.0 } else { loss / targets.len() as f64 };
        let needs = self.ng(logits);
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), probs };
        self.push(Tensor::scalar(loss as f32), op, needs)
    }

    /// Mean binary cross-entropy on logits.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f32]) -> Var {
        let z = self.value(logits).data();
        assert_eq!(z.len(), targets.len());
        let loss: f64 = z
            .iter()
            .zip(targets)
            .map(|(&z, &t)| (z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()) as f64)
            .sum();
        let loss = if z.is_empty() { 0.0 } else { loss / z.len() as f64 };
        let needs = self.ng(logits);
        let op = Op::BceWithLogits { logits, targets: targets.to_vec() };
        self.push(Tensor::scalar(loss as f32), op, needs)
    }

    /// `sum(smooth_l1(pred - target)) / norm`.
    pub fn smooth_l1(&mut self, pred: Var, target: &[f32], beta: f32, norm: f32) -> Var {
        let p = self.value(pred).data();
        assert_eq!(p.len(), target.len());
        let loss: f32 = p
            .iter()
            .zip(target)
            .map(|(a, b)| {
                let d = (a - b).abs();
                if d < beta {
                    0.5 * d * d / beta
                } else {
                    d - 0.5 * beta
                }
            })
            .sum();
        let needs = self.ng(pred);
        let op = Op::SmoothL1 { pred, target: target.to_vec(), beta, norm };
        self.push(Tensor::scalar(loss / norm), op, needs)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), 1.0));
        let mut params = BTreeMap::new();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(gy);
                    continue;
                }
                Op::Param(id) => {
                    params.insert(*id, gy);
                    continue;
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    self.conv_backward(&gy, *x, *w, *b, *stride, *pad, &mut grads);
                }
                Op::Linear { x, w, b } => {
                    let xs = self.value(*x).shape();
                    let (n, inp) = (xs[0], xs[1]);
                    let o = self.value(*w).dim(0);
                    if self.ng(*x) {
                        let mut dx = vec![0.0; n * inp];
                        gemm(n, o, inp, gy.data(), false, self.value(*w).data(), false, &mut dx, false);
                        self.acc(&mut grads, *x, Tensor::new([n, inp], dx));
                    }
                    if self.ng(*w) {
                        let mut dw = vec![0.0; o * inp];
                        gemm(o, n, inp, gy.data(), true, self.value(*x).data(), false, &mut dw, false);
                        self.acc(&mut grads, *w, Tensor::new([o, inp], dw));
                    }
                    if let Some(b) = b.filter(|b| self.ng(*b)) {
                        let mut db = vec![0.0; o];
                        for row in gy.data().chunks(o) {
                            db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                        }
                        self.acc(&mut grads, b, Tensor::new([o], db));
                    }
                }
                Op::Relu(x) => {
                    let xv = self.value(*x).data();
                    let data = gy.data().iter().zip(xv).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }).collect();
                    self.acc(&mut grads, *x, Tensor::new(gy.shape().to_vec(), data));
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        self.acc(&mut grads, *a, gy.clone());
                    }
                    if self.ng(*b) {
                        self.acc(&mut grads, *b, gy);
                    }
                }
                Op::Scale(x, s) => {
                    let data = gy.data().iter().map(|g| g * s).collect();
                    self.acc(&mut grads, *x, Tensor::new(gy.shape().to_vec(), data));
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).dim(1);
                    let cb = self.value(*b).dim(1);
                    let n = gy.dim(0);
                    let (mut da, mut db) = (Vec::with_capacity(n * ca), Vec::with_capacity(n * cb));
                    for r in 0..n {
                        let row = gy.row(r);
                        da.extend_from_slice(&row[..ca]);
                        db.extend_from_slice(&row[ca..]);
                    }
                    if self.ng(*a) {
                        self.acc(&mut grads, *a, Tensor::new([n, ca], da));
                    }
                    if self.ng(*b) {
                        self.acc(&mut grads, *b, Tensor::new([n, cb], db));
                    }
                }
                Op::GatherRows(x, idx) => {
                    let src = self.value(*x);
                    let stride = src.numel() / src.dim(0).max(1);
                    let mut dx = Tensor::zeros(src.shape().to_vec());
                    let d = dx.data_mut();
                    for (k, &i) in idx.iter().enumerate() {
                        let g = &gy.data()[k * stride..(k + 1) * stride];
                        d[i * stride..(i + 1) * stride].iter_mut().zip(g).for_each(|(a, b)| *a += b);
                    }
                    self.acc(&mut grads, *x, dx);
                }
                Op::GatherFlat(x, idx) => {
                    let mut dx = Tensor::zeros(self.value(*x).shape().to_vec());
                    let d = dx.data_mut();
                    for (k, &i) in idx.iter().enumerate() {
                        d[i] += gy.data()[k];
                    }
                    self.acc(&mut grads, *x, dx);
                }
                Op::Reshape(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    self.acc(&mut grads, *x, gy.reshape(shape));
                }
                Op::GlobalAvgPool(x) => {
                    let s = self.value(*x).shape().to_vec();
                    let hw = s[2] * s[3];
                    let mut data = Vec::with_capacity(s.iter().product());
                    for g in gy.data() {
                        data.extend(std::iter::repeat_n(g / hw as f32, hw));
                    }
                    self.acc(&mut grads, *x, Tensor::new(s, data));
                }
                Op::AvgPool(x, k) => {
                    let s = self.value(*x).shape().to_vec();
                    let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                    let (oh, ow) = (h / k, w / k);
                    let inv = 1.0 / (k * k) as f32;
                    let mut dx = vec![0.0f32; nc * h * w];
                    for p in 0..nc {
                        for y in 0..oh * k {
                            for xx in 0..ow * k {
                                dx[p * h * w + y * w + xx] = gy.data()[p * oh * ow + (y / k) * ow + xx / k] * inv;
                            }
                        }
                    }
                    self.acc(&mut grads, *x, Tensor::new(s, dx));
                }
                Op::Upsample2x(x) => {
                    let s = self.value(*x).shape().to_vec();
                    let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                    let mut dx = vec![0.0f32; nc * h * w];
                    for p in 0..nc {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                dx[p * h * w + (y / 2) * w + xx / 2] += gy.data()[p * 4 * h * w + y * 2 * w + xx];
                            }
                        }
                    }
                    self.acc(&mut grads, *x, Tensor::new(s, dx));
                }
                Op::RoiAlign { feat, plan } => {
                    let fs = self.value(*feat).shape().to_vec();
                    let (c, plane) = (fs[1], fs[2] * fs[3]);
                    let mut df = Tensor::zeros(fs);
                    let d = df.data_mut();
                    for (r, &b) in plan.batch.iter().enumerate() {
                        for ch in 0..c {
                            let base = (b * c + ch) * plane;
                            for bin in 0..plan.bins {
                                let g = gy.data()[(r * c + ch) * plan.bins + bin];
                                if g == 0.0 {
                                    continue;
                                }
                                let k = r * plan.bins + bin;
                                for &(i, wt) in &plan.taps[plan.offsets[k]..plan.offsets[k + 1]] {
                                    d[base + i as usize] += g * wt;
                                }
                            }
                        }
                    }
                    self.acc(&mut grads, *feat, df);
                }
                Op::GroupedSoftmaxCe { logits, groups, probs } => {
                    let scale = gy.item() / groups.len().max(1) as f32;
                    let mut dz = vec![0.0f32; probs.len()];
                    for g in groups {
                        for k in 0..g.len {
                            let onehot = if k == g.target { 1.0 } else { 0.0 };
                            dz[g.start + k] += (probs[g.start + k] - onehot) * scale;
                        }
                    }
                    let shape = self.value(*logits).shape().to_vec();
                    self.acc(&mut grads, *logits, Tensor::new(shape, dz));
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let k = self.value(*logits).dim(1);
                    let scale = gy.item() / targets.len().max(1) as f32;
                    let mut dz: Vec<f32> = probs.iter().map(|p| p * scale).collect();
                    for (r, &y) in targets.iter().enumerate() {
                        dz[r * k + y] -= scale;
                    }
                    let shape = self.value(*logits).shape().to_vec();
                    self.acc(&mut grads, *logits, Tensor::new(shape, dz));
                }
                Op::BceWithLogits { logits, targets } => {
                    let z = self.value(*logits);
                    let scale = gy.item() / targets.len().max(1) as f32;
                    let dz = z
                        .data()
                        .iter()
                        .zip(targets)
                        .map(|(&z, &t)| (sigmoid(z) - t) * scale)
                        .collect();
                    self.acc(&mut grads, *logits, Tensor::new(z.shape().to_vec(), dz));
                }
                Op::SmoothL1 { pred, target, beta, norm } => {
                    let p = self.value(*pred);
                    let scale = gy.item() / norm;
                    let dz = p
                        .data()
                        .iter()
                        .zip(target)
                        .map(|(a, b)| {
                            let d = a - b;
                            let g = if d.abs() < *beta { d / beta } else { d.signum() };
                            g * scale
                        })
                        .collect();
                    self.acc(&mut grads, *pred, Tensor::new(p.shape().to_vec(), dz));
                }
            }
        }
        Gradients { params, nodes: grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        gy: &Tensor,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        grads: &mut [Option<Tensor>],
    ) {
        let (xs, ws) = (self.value(x).shape().to_vec(), self.value(w).shape().to_vec());
        let geom = ConvGeom::new(&xs, &ws, stride, pad);
        let (ohw, krows) = (geom.out_hw(), geom.col_rows());
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let (need_x, need_w) = (self.ng(x), self.ng(w));
        let mut dw = if need_w { vec![0.0f32; geom.o * krows] } else { Vec::new() };
        let mut dx = if need_x { vec![0.0f32; xv.len()] } else { Vec::new() };
        let mut cols = vec![0.0f32; krows * ohw];
        let mut dcols = vec![0.0f32; krows * ohw];
        for n in 0..geom.n {
            let gyn = &gy.data()[n * geom.o * ohw..(n + 1) * geom.o * ohw];
            let xn = &xv[n * geom.in_chw()..(n + 1) * geom.in_chw()];
            if need_w {
                if geom.is_pointwise() {
                    gemm(geom.o, ohw, krows, gyn, false, xn, true, &mut dw, true);
                } else {
                    geom.im2col(xn, &mut cols);
                    gemm(geom.o, ohw, krows, gyn, false, &cols, true, &mut dw, true);
                }
            }
            if need_x {
                let dxn = &mut dx[n * geom.in_chw()..(n + 1) * geom.in_chw()];
                if geom.is_pointwise() {
                    gemm(krows, geom.o, ohw, wv, true, gyn, false, dxn, false);
                } else {
                    gemm(krows, geom.o, ohw, wv, true, gyn, false, &mut dcols, false);
                    geom.col2im(&dcols, dxn);
                }
            }
        }
        if need_x {
            self.acc(grads, x, Tensor::new(xs, dx));
        }
        if need_w {
            self.acc(grads, w, Tensor::new(ws, dw));
        }
        if let Some(b) = b.filter(|b| self.ng(*b)) {
            let mut db = vec![0.0f32; geom.o];
            for n in 0..geom.n {
                for (o, d) in db.iter_mut().enumerate() {
                    let start = (n * geom.o + o) * ohw;
                    *d += gy.data()[start..start + ohw].iter().sum::<f32>();
                }
            }
            self.acc(grads, b, Tensor::new([geom.o], db));
        }
    }
}

pub fn sigmoid(z: f32) -> f32 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn bilinear_taps(y: f32, x: f32, h: usize, w: usize, scale: f32, out: &mut Vec<(u32, f32)>) {
    if y < -1.0 || y > h as f32 || x < -1.0 || x > w as f32 {
        return;
    }
    let y = y.max(0.0);
    let x = x.max(0.0);
    let (mut y0, mut x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1);
    let (mut ly, mut lx) = (y - y0 as f32, x - x0 as f32);
    if y0 >= h - 1 {
        y0 = h - 1;
        y1 = h - 1;
        ly = 0.0;
    } else {
        y1 = y0 + 1;
    }
    if x0 >= w - 1 {
        x0 = w - 1;
        x1 = w - 1;
        lx = 0.0;
    } else {
        x1 = x0 + 1;
    }
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    for (yy, xx, wt) in [(y0, x0, hy * hx), (y0, x1, hy * lx), (y1, x0, ly * hx), (y1, x1, ly * lx)] {
        if wt != 0.0 {
            out.push(((yy * w + xx) as u32, wt * scale));
        }
    }
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> Self {
        let (kh, kw) = (ws[2], ws[3]);
        let oh = (xs[2] + 2 * pad - kh) / stride + 1;
        let ow = (xs[3] + 2 * pad - kw) / stride + 1;
        Self { n: xs[0], c: xs[1], h: xs[2], w: xs[3], o: ws[0], kh, kw, oh, ow, stride, pad }
    }

    fn out_hw(&self) -> usize {
        self.oh * self.ow
    }

    fn in_chw(&self) -> usize {
        self.c * self.h * self.w
    }

    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &[f32], cols: &mut [f32]) {
        let ohw = self.out_hw();
        for c in 0..self.c {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * ohw..(row + 1) * ohw];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let drow = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            drow.fill(0.0);
                            continue;
                        }
                        let srow = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize { 0.0 } else { srow[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f32], dx: &mut [f32]) {
        let ohw = self.out_hw();
        dx.fill(0.0);
        for c in 0..self.c {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * ohw..(row + 1) * ohw];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let drow = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                drow[ix as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

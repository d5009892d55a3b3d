use std::collections::HashMap;

use super::kernels::{self, ConvGeom, GroupStats, MatRef};
use super::{ParamId, ParamStore, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Abs(Var),
    Square(Var),
    Relu(Var),
    Silu(Var),
    Clamp(Var, f32, f32),
    Sum(Var),
    Mean(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: GroupStats,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    AddChannel(Var, Var),
    Concat(Var, Var),
    Upsample2(Var),
    AvgPool2(Var),
    Bmm {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    SoftmaxLast(Var),
    Reshape(Var),
    SliceBatch(Var, usize),
    Crop {
        x: Var,
        y0: usize,
        x0: usize,
    },
    Resize(Var),
    RepeatChannels(Var),
    TotalVariation {
        x: Var,
        mask: Option<Vec<f32>>,
        pairs: usize,
    },
    WeightedSum(Vec<(Var, f32)>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run computation tape with reverse-mode differentiation.
///
/// Every op records its inputs; [`Graph::backward`] walks the tape in
/// reverse. Constants never receive gradients.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

fn dims3(shape: &[usize]) -> (usize, usize, usize) {
    match *shape {
        [b, r, c] => (b, r, c),
        _ => panic!("expected a 3-d tensor, got {shape:?}"),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives gradients (inputs under test, parameters).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Registers a parameter once per graph; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.input(store.value(id).clone());
        self.params.insert(id, v);
        v
    }

    /// The node a parameter was registered under, if it was used.
    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f32 {
        self.value(v).item()
    }

    fn map_unary(&mut self, a: Var, op: Op, f: impl Fn(f32) -> f32) -> Var {
        let src = self.value(a);
        let data = src.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(src.shape().to_vec(), data);
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    fn zip_binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f32, f32) -> f32) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        self.map_unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::Abs(a), f32::abs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::Square(a), |x| x * x)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::Silu(a), |x| x / (1.0 + (-x).exp()))
    }

    /// Clamp to `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f32, hi: f32) -> Var {
        self.map_unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|&v| v as f64).sum::<f64>();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s as f32), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().map(|&v| v as f64).sum::<f64>() / t.numel() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s as f32), Op::Mean(a), rg)
    }

    /// `Σ wᵢ·sᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f32)]) -> Var {
        let mut acc = 0.0f64;
        let mut rg = false;
        for &(v, w) in terms {
            acc += self.scalar(v) as f64 * w as f64;
            rg |= self.rg(v);
        }
        self.push(Tensor::scalar(acc as f32), Op::WeightedSum(terms.to_vec()), rg)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, c, h, wd) = self.value(x).dims4();
        let (c_out, c_in, k, k2) = self.value(w).dims4();
        assert_eq!(c, c_in, "conv input channel mismatch");
        assert_eq!(k, k2);
        let geom = ConvGeom::new(c, h, wd, k, stride, pad);
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            n,
            &geom,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            c_out,
        );
        let t = Tensor::new(vec![n, c_out, geom.h_out, geom.w_out], out);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(t, Op::Conv2d { x, w, b, geom }, rg)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f32) -> Var {
        let dims = self.value(x).dims4();
        assert_eq!(dims.1 % groups, 0, "channels not divisible by groups");
        let (out, stats) = kernels::group_norm_forward(
            self.value(x).data(),
            dims,
            groups,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let t = Tensor::new(self.shape(x).to_vec(), out);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            t,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            rg,
        )
    }

    /// `x: [n, f]`, `w: [o, f]`, `b: [o]` → `[n, o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (n, f) = match *self.shape(x) {
            [n, f] => (n, f),
            ref s => panic!("linear expects [n, f], got {s:?}"),
        };
        let o = self.shape(w)[0];
        let mut out = vec![0.0f32; n * o];
        for row in out.chunks_mut(o) {
            row.copy_from_slice(self.value(b).data());
        }
        kernels::gemm(
            n,
            f,
            o,
            1.0,
            MatRef::new(self.value(x).data(), f, false),
            MatRef::new(self.value(w).data(), f, true),
            1.0,
            &mut out,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(Tensor::new(vec![n, o], out), Op::Linear { x, w, b }, rg)
    }

    /// Adds a per-(item, channel) offset `b: [n, c]` to `x: [n, c, h, w]`.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(self.shape(b), &[n, c]);
        let mut out = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for (i, chunk) in out.data_mut().chunks_mut(h * w).enumerate() {
            let v = bias[i];
            chunk.iter_mut().for_each(|x| *x += v);
        }
        let rg = self.rg(x) || self.rg(b);
        self.push(out, Op::AddChannel(x, b), rg)
    }

    /// Channel concatenation of two `[n, _, h, w]` tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (n, ca, h, w) = self.value(a).dims4();
        let (nb, cb, hb, wb) = self.value(b).dims4();
        assert_eq!((n, h, w), (nb, hb, wb), "concat spatial mismatch");
        let hw = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for i in 0..n {
            out.extend_from_slice(&self.value(a).data()[i * ca * hw..(i + 1) * ca * hw]);
            out.extend_from_slice(&self.value(b).data()[i * cb * hw..(i + 1) * cb * hw]);
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![n, ca + cb, h, w], out), Op::Concat(a, b), rg)
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let src = self.value(x).data();
        let mut out = vec![0.0f32; n * c * h * w * 4];
        for p in 0..n * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * h * w * 4..(p + 1) * h * w * 4];
            for y in 0..2 * h {
                for xo in 0..2 * w {
                    dst[y * 2 * w + xo] = plane[(y / 2) * w + xo / 2];
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![n, c, 2 * h, 2 * w], out), Op::Upsample2(x), rg)
    }

    /// 2×2 average pooling (odd trailing rows/columns are dropped).
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let (ho, wo) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = vec![0.0f32; n * c * ho * wo];
        for p in 0..n * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for y in 0..ho {
                for xo in 0..wo {
                    let s = plane[2 * y * w + 2 * xo]
                        + plane[2 * y * w + 2 * xo + 1]
                        + plane[(2 * y + 1) * w + 2 * xo]
                        + plane[(2 * y + 1) * w + 2 * xo + 1];
                    out[(p * ho + y) * wo + xo] = 0.25 * s;
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![n, c, ho, wo], out), Op::AvgPool2(x), rg)
    }

    /// Batched matmul of `[b, ·, ·]` tensors with optional transposes.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (ba, ar, ac) = dims3(self.shape(a));
        let (bb, br, bc) = dims3(self.shape(b));
        assert_eq!(ba, bb);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "bmm inner dimension mismatch");
        let mut out = vec![0.0f32; ba * m * n];
        for i in 0..ba {
            kernels::gemm(
                m,
                k,
                n,
                1.0,
                MatRef::new(&self.value(a).data()[i * ar * ac..(i + 1) * ar * ac], ac, ta),
                MatRef::new(&self.value(b).data()[i * br * bc..(i + 1) * br * bc], bc, tb),
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![ba, m, n], out), Op::Bmm { a, b, ta, tb }, rg)
    }

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let last = *t.shape().last().expect("softmax of a scalar");
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(last) {
            let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut s = 0.0f32;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out), Op::SoftmaxLast(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshape(shape.to_vec());
        let rg = self.rg(x);
        self.push(t, Op::Reshape(x), rg)
    }

    /// Item `index` of the leading dimension, keeping a unit batch axis.
    pub fn slice_batch(&mut self, x: Var, index: usize) -> Var {
        let shape = self.shape(x).to_vec();
        let item: usize = shape[1..].iter().product();
        let data = self.value(x).data()[index * item..(index + 1) * item].to_vec();
        let mut s = shape;
        s[0] = 1;
        let rg = self.rg(x);
        self.push(Tensor::new(s, data), Op::SliceBatch(x, index), rg)
    }

    /// Spatial crop `[y0, y0+h) × [x0, x0+w)` of an NCHW tensor.
    pub fn crop(&mut self, x: Var, y0: usize, x0: usize, h: usize, w: usize) -> Var {
        let (n, c, hh, ww) = self.value(x).dims4();
        assert!(y0 + h <= hh && x0 + w <= ww, "crop out of bounds");
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * h * w);
        for p in 0..n * c {
            for y in y0..y0 + h {
                let row = p * hh * ww + y * ww;
                out.extend_from_slice(&src[row + x0..row + x0 + w]);
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![n, c, h, w], out), Op::Crop { x, y0, x0 }, rg)
    }

    /// Bilinear resize of an NCHW tensor (half-pixel centers).
    pub fn resize(&mut self, x: Var, h: usize, w: usize) -> Var {
        let (n, c, hi, wi) = self.value(x).dims4();
        let ty = kernels::bilinear_taps(hi, h);
        let tx = kernels::bilinear_taps(wi, w);
        let src = self.value(x).data();
        let mut out = vec![0.0f32; n * c * h * w];
        for p in 0..n * c {
            let plane = &src[p * hi * wi..(p + 1) * hi * wi];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = plane[y0 * wi + x0] * (1.0 - fx) + plane[y0 * wi + x1] * fx;
                    let bot = plane[y1 * wi + x0] * (1.0 - fx) + plane[y1 * wi + x1] * fx;
                    out[(p * h + oy) * w + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![n, c, h, w], out), Op::Resize(x), rg)
    }

    /// Replicates a single-channel NCHW tensor to `times` channels.
    pub fn repeat_channels(&mut self, x: Var, times: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(c, 1, "repeat_channels expects one channel");
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * times * h * w);
        for i in 0..n {
            for _ in 0..times {
                out.extend_from_slice(&src[i * h * w..(i + 1) * h * w]);
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![n, times, h, w], out), Op::RepeatChannels(x), rg)
    }

    /// Anisotropic total variation: mean absolute difference over horizontal
    /// and vertical neighbour pairs within each trailing 2-d plane. With a
    /// mask (same length as `x`), only pairs whose endpoints are both inside
    /// count. Zero when no pair qualifies.
    pub fn total_variation(&mut self, x: Var, mask: Option<&[f32]>) -> Var {
        let shape = self.shape(x).to_vec();
        assert!(shape.len() >= 2);
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let src = self.value(x).data();
        if let Some(m) = mask {
            assert_eq!(m.len(), src.len(), "tv mask length mismatch");
        }
        let inside = |i: usize| mask.is_none_or(|m| m[i] > 0.0);
        let mut total = 0.0f64;
        let mut pairs = 0usize;
        for p in 0..src.len() / (h * w) {
            let base = p * h * w;
            for y in 0..h {
                for xx in 0..w {
                    let i = base + y * w + xx;
                    if xx + 1 < w && inside(i) && inside(i + 1) {
                        total += (src[i + 1] - src[i]).abs() as f64;
                        pairs += 1;
                    }
                    if y + 1 < h && inside(i) && inside(i + w) {
                        total += (src[i + w] - src[i]).abs() as f64;
                        pairs += 1;
                    }
                }
            }
        }
        let value = if pairs == 0 { 0.0 } else { total / pairs as f64 };
        let rg = self.rg(x);
        self.push(
            Tensor::scalar(value as f32),
            Op::TotalVariation {
                x,
                mask: mask.map(<[f32]>::to_vec),
                pairs,
            },
            rg,
        )
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn like(&self, v: Var, data: Vec<f32>) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), data)
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*b) {
                    let neg = gd.iter().map(|v| -v).collect();
                    self.accumulate(grads, *b, self.like(*b, neg));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let d = gd.iter().zip(self.value(*b).data()).map(|(g, y)| g * y).collect();
                    self.accumulate(grads, *a, self.like(*a, d));
                }
                if self.rg(*b) {
                    let d = gd.iter().zip(self.value(*a).data()).map(|(g, x)| g * x).collect();
                    self.accumulate(grads, *b, self.like(*b, d));
                }
            }
            Op::Scale(a, s) => {
                let d = gd.iter().map(|v| v * s).collect();
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::Abs(a) => {
                let d = gd
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(g, &x)| {
                        if x > 0.0 {
                            *g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::Square(a) => {
                let d = gd.iter().zip(self.value(*a).data()).map(|(g, x)| 2.0 * g * x).collect();
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::Relu(a) => {
                let d = gd
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::Silu(a) => {
                let d = gd
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(g, &x)| {
                        let s = 1.0 / (1.0 + (-x).exp());
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::Clamp(a, lo, hi) => {
                let d = gd
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(g, &x)| if x > *lo && x < *hi { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, self.like(*a, vec![gd[0]; n]));
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, self.like(*a, vec![gd[0] / n as f32; n]));
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    self.accumulate(grads, v, Tensor::new(self.shape(v).to_vec(), vec![gd[0] * w]));
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let n = self.value(*x).dims4().0;
                let c_out = self.shape(*w)[0];
                let mut dw = self.rg(*w).then(|| vec![0.0f32; self.value(*w).numel()]);
                let mut db = b.filter(|b| self.rg(*b)).map(|b| vec![0.0f32; self.value(b).numel()]);
                let dx = kernels::conv2d_backward(
                    self.value(*x).data(),
                    n,
                    geom,
                    self.value(*w).data(),
                    c_out,
                    gd,
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                    self.rg(*x),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, self.like(*x, dx));
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, self.like(*w, dw));
                }
                if let (Some(b), Some(db)) = (b, db) {
                    self.accumulate(grads, *b, self.like(*b, db));
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let c = self.value(*gamma).numel();
                let mut dgamma = vec![0.0f32; c];
                let mut dbeta = vec![0.0f32; c];
                let dx = kernels::group_norm_backward(
                    self.value(*x).data(),
                    self.value(*x).dims4(),
                    *groups,
                    self.value(*gamma).data(),
                    stats,
                    gd,
                    &mut dgamma,
                    &mut dbeta,
                );
                self.accumulate(grads, *x, self.like(*x, dx));
                self.accumulate(grads, *gamma, self.like(*gamma, dgamma));
                self.accumulate(grads, *beta, self.like(*beta, dbeta));
            }
            Op::Linear { x, w, b } => {
                let (n, f) = (self.shape(*x)[0], self.shape(*x)[1]);
                let o = self.shape(*w)[0];
                if self.rg(*x) {
                    let mut dx = vec![0.0f32; n * f];
                    kernels::gemm(
                        n,
                        o,
                        f,
                        1.0,
                        MatRef::new(gd, o, false),
                        MatRef::new(self.value(*w).data(), f, false),
                        0.0,
                        &mut dx,
                    );
                    self.accumulate(grads, *x, self.like(*x, dx));
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0f32; o * f];
                    kernels::gemm(
                        o,
                        n,
                        f,
                        1.0,
                        MatRef::new(gd, o, true),
                        MatRef::new(self.value(*x).data(), f, false),
                        0.0,
                        &mut dw,
                    );
                    self.accumulate(grads, *w, self.like(*w, dw));
                }
                if self.rg(*b) {
                    let mut db = vec![0.0f32; o];
                    for row in gd.chunks(o) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                    self.accumulate(grads, *b, self.like(*b, db));
                }
            }
            Op::AddChannel(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.rg(*b) {
                    let (_, _, h, w) = self.value(*x).dims4();
                    let db = gd
                        .chunks(h * w)
                        .map(|c| c.iter().map(|&v| v as f64).sum::<f64>() as f32)
                        .collect();
                    self.accumulate(grads, *b, self.like(*b, db));
                }
            }
            Op::Concat(a, b) => {
                let (n, ca, h, w) = self.value(*a).dims4();
                let cb = self.shape(*b)[1];
                let hw = h * w;
                let mut da = Vec::with_capacity(n * ca * hw);
                let mut dbv = Vec::with_capacity(n * cb * hw);
                for i in 0..n {
                    let base = i * (ca + cb) * hw;
                    da.extend_from_slice(&gd[base..base + ca * hw]);
                    dbv.extend_from_slice(&gd[base + ca * hw..base + (ca + cb) * hw]);
                }
                self.accumulate(grads, *a, self.like(*a, da));
                self.accumulate(grads, *b, self.like(*b, dbv));
            }
            Op::Upsample2(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let mut dx = vec![0.0f32; n * c * h * w];
                for p in 0..n * c {
                    let src = &gd[p * h * w * 4..(p + 1) * h * w * 4];
                    for y in 0..2 * h {
                        for xo in 0..2 * w {
                            dx[p * h * w + (y / 2) * w + xo / 2] += src[y * 2 * w + xo];
                        }
                    }
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::AvgPool2(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let (ho, wo) = (h / 2, w / 2);
                let mut dx = vec![0.0f32; n * c * h * w];
                for p in 0..n * c {
                    for y in 0..ho {
                        for xo in 0..wo {
                            let v = 0.25 * gd[(p * ho + y) * wo + xo];
                            let base = p * h * w;
                            dx[base + 2 * y * w + 2 * xo] += v;
                            dx[base + 2 * y * w + 2 * xo + 1] += v;
                            dx[base + (2 * y + 1) * w + 2 * xo] += v;
                            dx[base + (2 * y + 1) * w + 2 * xo + 1] += v;
                        }
                    }
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::Bmm { a, b, ta, tb } => {
                self.bmm_backward(*a, *b, *ta, *tb, gd, grads);
            }
            Op::SoftmaxLast(x) => {
                let y = node.value.data();
                let last = *node.value.shape().last().unwrap();
                let mut dx = vec![0.0f32; y.len()];
                for ((yr, gr), dr) in y.chunks(last).zip(gd.chunks(last)).zip(dx.chunks_mut(last)) {
                    let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for i in 0..last {
                        dr[i] = yr[i] * (gr[i] - dot);
                    }
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, self.like(*x, gd.to_vec()));
            }
            Op::SliceBatch(x, index) => {
                let mut dx = vec![0.0f32; self.value(*x).numel()];
                let item = gd.len();
                dx[index * item..(index + 1) * item].copy_from_slice(gd);
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::Crop { x, y0, x0 } => {
                let (n, c, hh, ww) = self.value(*x).dims4();
                let (_, _, h, w) = node.value.dims4();
                let mut dx = vec![0.0f32; n * c * hh * ww];
                for p in 0..n * c {
                    for y in 0..h {
                        let dst = p * hh * ww + (y0 + y) * ww + x0;
                        let src = (p * h + y) * w;
                        dx[dst..dst + w].copy_from_slice(&gd[src..src + w]);
                    }
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::Resize(x) => {
                let (n, c, hi, wi) = self.value(*x).dims4();
                let (_, _, h, w) = node.value.dims4();
                let ty = kernels::bilinear_taps(hi, h);
                let tx = kernels::bilinear_taps(wi, w);
                let mut dx = vec![0.0f32; n * c * hi * wi];
                for p in 0..n * c {
                    let plane = &mut dx[p * hi * wi..(p + 1) * hi * wi];
                    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let gv = gd[(p * h + oy) * w + ox];
                            plane[y0 * wi + x0] += gv * (1.0 - fy) * (1.0 - fx);
                            plane[y0 * wi + x1] += gv * (1.0 - fy) * fx;
                            plane[y1 * wi + x0] += gv * fy * (1.0 - fx);
                            plane[y1 * wi + x1] += gv * fy * fx;
                        }
                    }
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::RepeatChannels(x) => {
                let (n, _, h, w) = self.value(*x).dims4();
                let times = node.value.shape()[1];
                let mut dx = vec![0.0f32; n * h * w];
                for i in 0..n {
                    for t in 0..times {
                        let src = &gd[(i * times + t) * h * w..(i * times + t + 1) * h * w];
                        dx[i * h * w..(i + 1) * h * w]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, s)| *d += s);
                    }
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::TotalVariation { x, mask, pairs } => {
                if *pairs == 0 {
                    return;
                }
                let shape = self.shape(*x);
                let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                let src = self.value(*x).data();
                let inside = |i: usize| mask.as_ref().is_none_or(|m| m[i] > 0.0);
                let scale = gd[0] / *pairs as f32;
                let mut dx = vec![0.0f32; src.len()];
                let sign = |d: f32| {
                    if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                };
                for p in 0..src.len() / (h * w) {
                    let base = p * h * w;
                    for y in 0..h {
                        for xx in 0..w {
                            let i = base + y * w + xx;
                            if xx + 1 < w && inside(i) && inside(i + 1) {
                                let s = sign(src[i + 1] - src[i]) * scale;
                                dx[i + 1] += s;
                                dx[i] -= s;
                            }
                            if y + 1 < h && inside(i) && inside(i + w) {
                                let s = sign(src[i + w] - src[i]) * scale;
                                dx[i + w] += s;
                                dx[i] -= s;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
        }
    }

    fn bmm_backward(&self, a: Var, b: Var, ta: bool, tb: bool, gd: &[f32], grads: &mut [Option<Tensor>]) {
        let (batch, ar, ac) = dims3(self.shape(a));
        let (_, br, bc) = dims3(self.shape(b));
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let n = if tb { br } else { bc };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        if self.rg(a) {
            let mut da = vec![0.0f32; av.len()];
            for i in 0..batch {
                let gi = &gd[i * m * n..(i + 1) * m * n];
                let bi = &bv[i * br * bc..(i + 1) * br * bc];
                let dst = &mut da[i * ar * ac..(i + 1) * ar * ac];
                if ta {
                    // dA = op(B) · dCᵀ  (k×n · n×m)
                    kernels::gemm(
                        k,
                        n,
                        m,
                        1.0,
                        MatRef::new(bi, bc, tb),
                        MatRef::new(gi, n, true),
                        0.0,
                        dst,
                    );
                } else {
                    // dA = dC · op(B)ᵀ  (m×n · n×k)
                    kernels::gemm(
                        m,
                        n,
                        k,
                        1.0,
                        MatRef::new(gi, n, false),
                        MatRef::new(bi, bc, !tb),
                        0.0,
                        dst,
                    );
                }
            }
            self.accumulate(grads, a, self.like(a, da));
        }
        if self.rg(b) {
            let mut db = vec![0.0f32; bv.len()];
            for i in 0..batch {
                let gi = &gd[i * m * n..(i + 1) * m * n];
                let ai = &av[i * ar * ac..(i + 1) * ar * ac];
                let dst = &mut db[i * br * bc..(i + 1) * br * bc];
                if tb {
                    // dB = dCᵀ · op(A)  (n×m · m×k)
                    kernels::gemm(
                        n,
                        m,
                        k,
                        1.0,
                        MatRef::new(gi, n, true),
                        MatRef::new(ai, ac, ta),
                        0.0,
                        dst,
                    );
                } else {
                    // dB = op(A)ᵀ · dC  (k×m · m×n)
                    kernels::gemm(
                        k,
                        m,
                        n,
                        1.0,
                        MatRef::new(ai, ac, !ta),
                        MatRef::new(gi, n, false),
                        0.0,
                        dst,
                    );
                }
            }
            self.accumulate(grads, b, self.like(b, db));
        }
    }
}

//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Every operation appends a node holding its output value; node ids are
//! handed back to the caller. Because an op's inputs always precede it on the
//! tape, a reverse walk over node indices is already a topological order, so
//! `backward` is a single reverse sweep that accumulates gradients into a
//! side table. Values are f64 throughout; forward results are scanned for
//! non-finite values so a NaN surfaces at the op that produced it.

use crate::error::{Error, Result};
use crate::tensor::{contiguous_strides, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(pub usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    Affine { x: ValueId, mul: f64 },
    Matmul { a: ValueId, b: ValueId },
    Conv2d { input: ValueId, weight: ValueId, bias: Option<ValueId>, stride: usize, padding: usize },
    Relu(ValueId),
    Sigmoid(ValueId),
    Softmax { x: ValueId, axis: usize },
    Reshape { x: ValueId },
    Permute { x: ValueId, perm: Vec<usize> },
    ReduceSum { x: ValueId, axes: Vec<usize> },
    ReduceMean { x: ValueId, axes: Vec<usize>, count: usize },
    ScaleAxis { x: ValueId, weights: Vec<f64>, axis: usize },
    RepeatAxis { x: ValueId, axis: usize, count: usize },
    AddConstSuffix { x: ValueId },
    BceSum { pred: ValueId, target: Tensor, eps: f64 },
    SmoothL1Sum { pred: ValueId, target: Tensor, beta: f64 },
}

struct Node {
    op: Op,
    value: Tensor,
}

pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ValueId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: ValueId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<ValueId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { op, value });
        Ok(ValueId(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor) -> Result<ValueId> {
        self.push(Op::Leaf, value, "leaf")
    }

    fn binary_same_shape(
        &mut self,
        name: &'static str,
        a: ValueId,
        b: ValueId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<ValueId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(
                name,
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::from_vec(ta.shape(), data)?;
        self.push(op, value, name)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `mul * x + add`, elementwise with scalar constants.
    pub fn affine(&mut self, x: ValueId, mul: f64, add: f64) -> Result<ValueId> {
        let t = self.value(x);
        let data: Vec<f64> = t.data().iter().map(|v| mul * v + add).collect();
        let value = Tensor::from_vec(t.shape(), data)?;
        self.push(Op::Affine { x, mul }, value, "affine")
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}", sa, sb),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), tb.data(), &mut out);
        let value = Tensor::from_vec(&[m, n], out)?;
        self.push(Op::Matmul { a, b }, value, "matmul")
    }

    /// 2D convolution over `[N, C_in, H, W]` with weight `[C_out, C_in, kh, kw]`
    /// and optional bias `[C_out]`; zero padding, floor output size.
    pub fn conv2d(
        &mut self,
        input: ValueId,
        weight: ValueId,
        bias: Option<ValueId>,
        stride: usize,
        padding: usize,
    ) -> Result<ValueId> {
        let (ti, tw) = (self.value(input), self.value(weight));
        let (si, sw) = (ti.shape().to_vec(), tw.shape().to_vec());
        if si.len() != 4 || sw.len() != 4 || si[1] != sw[1] {
            return Err(shape_err(
                "conv2d",
                format!("input {:?} weight {:?}", si, sw),
            ));
        }
        if stride == 0 {
            return Err(shape_err("conv2d", "stride 0".into()));
        }
        let (n, ci, h, w) = (si[0], si[1], si[2], si[3]);
        let (co, _, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(shape_err(
                "conv2d",
                format!("kernel {}x{} exceeds padded input {}x{}", kh, kw, h + 2 * padding, w + 2 * padding),
            ));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let bias_vec: Option<Vec<f64>> = match bias {
            Some(bid) => {
                let tb = self.value(bid);
                if tb.shape() != [co] {
                    return Err(shape_err(
                        "conv2d",
                        format!("bias {:?} vs {} channels", tb.shape(), co),
                    ));
                }
                Some(tb.data().to_vec())
            }
            None => None,
        };
        let kdim = ci * kh * kw;
        let mut out = vec![0.0; n * co * oh * ow];
        let mut col = vec![0.0; kdim * oh * ow];
        let in_data = self.value(input).data();
        let w_data = self.value(weight).data();
        for s in 0..n {
            let sample = &in_data[s * ci * h * w..(s + 1) * ci * h * w];
            im2col(sample, ci, h, w, kh, kw, stride, padding, oh, ow, &mut col);
            let out_s = &mut out[s * co * oh * ow..(s + 1) * co * oh * ow];
            gemm(co, kdim, oh * ow, w_data, &col, out_s);
            if let Some(b) = &bias_vec {
                for c in 0..co {
                    let row = &mut out_s[c * oh * ow..(c + 1) * oh * ow];
                    for v in row.iter_mut() {
                        *v += b[c];
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[n, co, oh, ow], out)?;
        self.push(
            Op::Conv2d { input, weight, bias, stride, padding },
            value,
            "conv2d",
        )
    }

    pub fn relu(&mut self, x: ValueId) -> Result<ValueId> {
        let t = self.value(x);
        let data: Vec<f64> = t.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::from_vec(t.shape(), data)?;
        self.push(Op::Relu(x), value, "relu")
    }

    pub fn sigmoid(&mut self, x: ValueId) -> Result<ValueId> {
        let t = self.value(x);
        let data: Vec<f64> = t
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let value = Tensor::from_vec(t.shape(), data)?;
        self.push(Op::Sigmoid(x), value, "sigmoid")
    }

    pub fn softmax(&mut self, x: ValueId, axis: usize) -> Result<ValueId> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        if axis >= shape.len() {
            return Err(shape_err("softmax", format!("axis {axis} of {:?}", shape)));
        }
        let (outer, lanes, inner) = split_axis(&shape, axis);
        let mut data = t.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * lanes * inner + i;
                let mut max = f64::NEG_INFINITY;
                for l in 0..lanes {
                    max = max.max(data[base + l * inner]);
                }
                let mut sum = 0.0;
                for l in 0..lanes {
                    let e = (data[base + l * inner] - max).exp();
                    data[base + l * inner] = e;
                    sum += e;
                }
                for l in 0..lanes {
                    data[base + l * inner] /= sum;
                }
            }
        }
        let value = Tensor::from_vec(&shape, data)?;
        self.push(Op::Softmax { x, axis }, value, "softmax")
    }

    pub fn reshape(&mut self, x: ValueId, shape: &[usize]) -> Result<ValueId> {
        let t = self.value(x);
        let n: usize = shape.iter().product();
        if n != t.numel() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {:?}", t.shape(), shape),
            ));
        }
        let value = Tensor::from_vec(shape, t.data().to_vec())?;
        self.push(Op::Reshape { x }, value, "reshape")
    }

    pub fn permute(&mut self, x: ValueId, perm: &[usize]) -> Result<ValueId> {
        let t = self.value(x);
        let rank = t.shape().len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err(
                "permute",
                format!("perm {:?} of rank {}", perm, rank),
            ));
        }
        let value = permute_tensor(t, perm);
        self.push(Op::Permute { x, perm: perm.to_vec() }, value, "permute")
    }

    pub fn reduce_sum(&mut self, x: ValueId, axes: &[usize]) -> Result<ValueId> {
        let (value, axes) = self.reduce_forward("reduce_sum", x, axes)?;
        self.push(Op::ReduceSum { x, axes }, value, "reduce_sum")
    }

    pub fn reduce_mean(&mut self, x: ValueId, axes: &[usize]) -> Result<ValueId> {
        let (mut value, axes) = self.reduce_forward("reduce_mean", x, axes)?;
        let count: usize = axes.iter().map(|&ax| self.value(x).shape()[ax]).product();
        for v in value.data_mut() {
            *v /= count as f64;
        }
        self.push(Op::ReduceMean { x, axes, count }, value, "reduce_mean")
    }

    fn reduce_forward(
        &self,
        name: &'static str,
        x: ValueId,
        axes: &[usize],
    ) -> Result<(Tensor, Vec<usize>)> {
        let t = self.value(x);
        let shape = t.shape();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if axes.is_empty() || axes.iter().any(|&a| a >= shape.len()) {
            return Err(shape_err(name, format!("axes {:?} of {:?}", axes, shape)));
        }
        let out_shape = reduced_shape(shape, &axes);
        let mut out = Tensor::zeros(&out_shape);
        let contrib = reduce_contrib(shape, &axes, &out_shape);
        let data = t.data();
        let out_data = out.data_mut();
        let in_strides = contiguous_strides(shape);
        for (lin, &v) in data.iter().enumerate() {
            let mut off = 0;
            for d in 0..shape.len() {
                let idx = (lin / in_strides[d]) % shape[d];
                off += idx * contrib[d];
            }
            out_data[off] += v;
        }
        Ok((out, axes))
    }

    /// Multiply by `weights[l]` along `axis` (weights are constants).
    pub fn scale_axis(&mut self, x: ValueId, weights: &[f64], axis: usize) -> Result<ValueId> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        if axis >= shape.len() || weights.len() != shape[axis] {
            return Err(shape_err(
                "scale_axis",
                format!("{} weights on axis {} of {:?}", weights.len(), axis, shape),
            ));
        }
        let (outer, lanes, inner) = split_axis(&shape, axis);
        let mut data = t.data().to_vec();
        scale_lanes(&mut data, outer, lanes, inner, weights);
        let value = Tensor::from_vec(&shape, data)?;
        self.push(
            Op::ScaleAxis { x, weights: weights.to_vec(), axis },
            value,
            "scale_axis",
        )
    }

    /// Insert a new axis of size `count` at `axis`, tiling the input.
    pub fn repeat_axis(&mut self, x: ValueId, axis: usize, count: usize) -> Result<ValueId> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        if axis > shape.len() || count == 0 {
            return Err(shape_err(
                "repeat_axis",
                format!("axis {} count {} of {:?}", axis, count, shape),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let mut out_shape = shape.clone();
        out_shape.insert(axis, count);
        let mut data = vec![0.0; outer * count * inner];
        let src = t.data();
        for o in 0..outer {
            let block = &src[o * inner..(o + 1) * inner];
            for r in 0..count {
                data[(o * count + r) * inner..(o * count + r + 1) * inner].copy_from_slice(block);
            }
        }
        let value = Tensor::from_vec(&out_shape, data)?;
        self.push(Op::RepeatAxis { x, axis, count }, value, "repeat_axis")
    }

    /// Add a constant tensor whose shape is a suffix of x's shape, broadcast
    /// over the leading axes.
    pub fn add_const_suffix(&mut self, x: ValueId, c: &Tensor) -> Result<ValueId> {
        let t = self.value(x);
        let shape = t.shape();
        let cs = c.shape();
        if cs.len() > shape.len() || &shape[shape.len() - cs.len()..] != cs {
            return Err(shape_err(
                "add_const_suffix",
                format!("const {:?} not a suffix of {:?}", cs, shape),
            ));
        }
        let inner = c.numel();
        let mut data = t.data().to_vec();
        for block in data.chunks_mut(inner) {
            for (v, &cv) in block.iter_mut().zip(c.data()) {
                *v += cv;
            }
        }
        let value = Tensor::from_vec(shape, data)?;
        self.push(Op::AddConstSuffix { x }, value, "add_const_suffix")
    }

    /// Summed binary cross-entropy of predicted probabilities against a
    /// constant 0/1 target: `Σ t·ln(clamp(p)) + (1−t)·ln(1−clamp(p))`.
    /// Returns a scalar; callers apply their own normalization and sign.
    pub fn bce_sum(&mut self, pred: ValueId, target: &Tensor, eps: f64) -> Result<ValueId> {
        let t = self.value(pred);
        if t.shape() != target.shape() {
            return Err(shape_err(
                "bce_sum",
                format!("pred {:?} vs target {:?}", t.shape(), target.shape()),
            ));
        }
        let mut total = 0.0;
        for (&p, &g) in t.data().iter().zip(target.data()) {
            let p = p.clamp(eps, 1.0 - eps);
            total += g * p.ln() + (1.0 - g) * (1.0 - p).ln();
        }
        self.push(
            Op::BceSum { pred, target: target.clone(), eps },
            Tensor::scalar(total),
            "bce_sum",
        )
    }

    /// Summed smooth-L1 of (pred − target) against a constant target:
    /// quadratic `d²/(2β)` inside |d| < β, linear `|d| − β/2` outside.
    pub fn smooth_l1_sum(&mut self, pred: ValueId, target: &Tensor, beta: f64) -> Result<ValueId> {
        let t = self.value(pred);
        if t.shape() != target.shape() {
            return Err(shape_err(
                "smooth_l1_sum",
                format!("pred {:?} vs target {:?}", t.shape(), target.shape()),
            ));
        }
        if !(beta > 0.0) {
            return Err(Error::Config(format!("smooth-l1 beta must be positive, got {beta}")));
        }
        let mut total = 0.0;
        for (&p, &g) in t.data().iter().zip(target.data()) {
            let d = p - g;
            total += if d.abs() < beta {
                d * d / (2.0 * beta)
            } else {
                d.abs() - beta / 2.0
            };
        }
        self.push(
            Op::SmoothL1Sum { pred, target: target.clone(), beta },
            Tensor::scalar(total),
            "smooth_l1_sum",
        )
    }

    /// Reverse sweep from a scalar root. Returns one gradient slot per node;
    /// leaves the caller cares about are read out by id.
    pub fn backward(&self, root: ValueId) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(shape_err(
                "backward",
                format!("root has shape {:?}, must be scalar", self.value(root).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    let mut neg = g.clone();
                    for v in neg.data_mut() {
                        *v = -*v;
                    }
                    accumulate(&mut grads[b.0], neg);
                }
                Op::Mul(a, b) => {
                    let ga = zip_mul(&g, self.value(*b));
                    let gb = zip_mul(&g, self.value(*a));
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Affine { x, mul } => {
                    let mut gx = g.clone();
                    for v in gx.data_mut() {
                        *v *= mul;
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Matmul { a, b } => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k) = (ta.shape()[0], ta.shape()[1]);
                    let n = tb.shape()[1];
                    let gd = g.data();
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for kk in 0..k {
                            let mut acc = 0.0;
                            let grow = &gd[i * n..(i + 1) * n];
                            let brow = &tb.data()[kk * n..(kk + 1) * n];
                            for j in 0..n {
                                acc += grow[j] * brow[j];
                            }
                            ga[i * k + kk] = acc;
                        }
                    }
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        for kk in 0..k {
                            let av = ta.data()[i * k + kk];
                            let grow = &gd[i * n..(i + 1) * n];
                            let brow = &mut gb[kk * n..(kk + 1) * n];
                            for j in 0..n {
                                brow[j] += av * grow[j];
                            }
                        }
                    }
                    accumulate(&mut grads[a.0], Tensor::from_vec(&[m, k], ga)?);
                    accumulate(&mut grads[b.0], Tensor::from_vec(&[k, n], gb)?);
                }
                Op::Conv2d { input, weight, bias, stride, padding } => {
                    let (gi, gw, gb) = conv2d_backward(
                        self.value(*input),
                        self.value(*weight),
                        &g,
                        *stride,
                        *padding,
                    );
                    accumulate(&mut grads[input.0], gi);
                    accumulate(&mut grads[weight.0], gw);
                    if let Some(bid) = bias {
                        accumulate(&mut grads[bid.0], gb);
                    }
                }
                Op::Relu(x) => {
                    let tx = self.value(*x);
                    let data: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(tx.data())
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[x.0], Tensor::from_vec(tx.shape(), data)?);
                }
                Op::Sigmoid(x) => {
                    let s = &node.value;
                    let data: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(s.data())
                        .map(|(gv, sv)| gv * sv * (1.0 - sv))
                        .collect();
                    accumulate(&mut grads[x.0], Tensor::from_vec(s.shape(), data)?);
                }
                Op::Softmax { x, axis } => {
                    let s = &node.value;
                    let shape = s.shape().to_vec();
                    let (outer, lanes, inner) = split_axis(&shape, *axis);
                    let mut gx = vec![0.0; s.numel()];
                    let sd = s.data();
                    let gd = g.data();
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * lanes * inner + i;
                            let mut dot = 0.0;
                            for l in 0..lanes {
                                let k = base + l * inner;
                                dot += gd[k] * sd[k];
                            }
                            for l in 0..lanes {
                                let k = base + l * inner;
                                gx[k] = sd[k] * (gd[k] - dot);
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::from_vec(&shape, gx)?);
                }
                Op::Reshape { x } => {
                    let gx = g.clone().reshaped(self.value(*x).shape())?;
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Permute { x, perm } => {
                    let mut inverse = vec![0usize; perm.len()];
                    for (d, &p) in perm.iter().enumerate() {
                        inverse[p] = d;
                    }
                    accumulate(&mut grads[x.0], permute_tensor(&g, &inverse));
                }
                Op::ReduceSum { x, axes } => {
                    let gx = broadcast_reduced(&g, self.value(*x).shape(), axes, 1.0);
                    accumulate(&mut grads[x.0], gx);
                }
                Op::ReduceMean { x, axes, count } => {
                    let gx = broadcast_reduced(&g, self.value(*x).shape(), axes, 1.0 / *count as f64);
                    accumulate(&mut grads[x.0], gx);
                }
                Op::ScaleAxis { x, weights, axis } => {
                    let shape = self.value(*x).shape().to_vec();
                    let (outer, lanes, inner) = split_axis(&shape, *axis);
                    let mut gx = g.data().to_vec();
                    scale_lanes(&mut gx, outer, lanes, inner, weights);
                    accumulate(&mut grads[x.0], Tensor::from_vec(&shape, gx)?);
                }
                Op::RepeatAxis { x, axis, count } => {
                    let in_shape = self.value(*x).shape().to_vec();
                    let outer: usize = in_shape[..*axis].iter().product();
                    let inner: usize = in_shape[*axis..].iter().product();
                    let gd = g.data();
                    let mut gx = vec![0.0; outer * inner];
                    for o in 0..outer {
                        for r in 0..*count {
                            let block = &gd[(o * count + r) * inner..(o * count + r + 1) * inner];
                            let dst = &mut gx[o * inner..(o + 1) * inner];
                            for (d, s) in dst.iter_mut().zip(block) {
                                *d += s;
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::from_vec(&in_shape, gx)?);
                }
                Op::AddConstSuffix { x } => {
                    accumulate(&mut grads[x.0], g.clone());
                }
                Op::BceSum { pred, target, eps } => {
                    let scale = g.item();
                    let tp = self.value(*pred);
                    let data: Vec<f64> = tp
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&p, &t)| {
                            if p < *eps || p > 1.0 - *eps {
                                // clamp active: locally flat
                                0.0
                            } else {
                                scale * (t / p - (1.0 - t) / (1.0 - p))
                            }
                        })
                        .collect();
                    accumulate(&mut grads[pred.0], Tensor::from_vec(tp.shape(), data)?);
                }
                Op::SmoothL1Sum { pred, target, beta } => {
                    let scale = g.item();
                    let tp = self.value(*pred);
                    let data: Vec<f64> = tp
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&p, &t)| {
                            let d = p - t;
                            scale * if d.abs() < *beta { d / beta } else { d.signum() }
                        })
                        .collect();
                    accumulate(&mut grads[pred.0], Tensor::from_vec(tp.shape(), data)?);
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        None => *slot = Some(delta),
        Some(t) => {
            debug_assert_eq!(t.shape(), delta.shape());
            for (a, b) in t.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
    }
}

fn zip_mul(a: &Tensor, b: &Tensor) -> Tensor {
    let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::from_vec(a.shape(), data).unwrap()
}

/// (product of dims before axis, dim at axis, product after).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn scale_lanes(data: &mut [f64], outer: usize, lanes: usize, inner: usize, weights: &[f64]) {
    for o in 0..outer {
        for l in 0..lanes {
            let w = weights[l];
            let base = (o * lanes + l) * inner;
            for v in &mut data[base..base + inner] {
                *v *= w;
            }
        }
    }
}

fn reduced_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let kept: Vec<usize> = (0..shape.len())
        .filter(|d| !axes.contains(d))
        .map(|d| shape[d])
        .collect();
    if kept.is_empty() {
        vec![1]
    } else {
        kept
    }
}

/// Per-input-axis multiplier mapping an input index to its output offset
/// (zero for reduced axes).
fn reduce_contrib(shape: &[usize], axes: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let out_strides = contiguous_strides(out_shape);
    let mut contrib = vec![0usize; shape.len()];
    let mut out_d = 0;
    for d in 0..shape.len() {
        if !axes.contains(&d) {
            contrib[d] = out_strides[out_d];
            out_d += 1;
        }
    }
    contrib
}

fn broadcast_reduced(g: &Tensor, in_shape: &[usize], axes: &[usize], scale: f64) -> Tensor {
    let out_shape = reduced_shape(in_shape, axes);
    debug_assert_eq!(g.shape(), &out_shape[..]);
    let contrib = reduce_contrib(in_shape, axes, &out_shape);
    let in_strides = contiguous_strides(in_shape);
    let n: usize = in_shape.iter().product();
    let gd = g.data();
    let mut out = vec![0.0; n];
    for (lin, slot) in out.iter_mut().enumerate() {
        let mut off = 0;
        for d in 0..in_shape.len() {
            let idx = (lin / in_strides[d]) % in_shape[d];
            off += idx * contrib[d];
        }
        *slot = gd[off] * scale;
    }
    Tensor::from_vec(in_shape, out).unwrap()
}

fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let in_shape = t.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let in_strides = contiguous_strides(in_shape);
    let out_strides = contiguous_strides(&out_shape);
    let mut data = vec![0.0; t.numel()];
    let src = t.data();
    // walk the output linearly; gather from the permuted input offset
    for (lin, slot) in data.iter_mut().enumerate() {
        let mut off = 0;
        for d in 0..out_shape.len() {
            let idx = (lin / out_strides[d]) % out_shape[d];
            off += idx * in_strides[perm[d]];
        }
        *slot = src[off];
    }
    Tensor::from_vec(&out_shape, data).unwrap()
}

/// C[m×n] += A[m×k] · B[k×n], row-major, accumulate into C.
fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    sample: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    col: &mut [f64],
) {
    debug_assert_eq!(col.len(), ci * kh * kw * oh * ow);
    for c in 0..ci {
        let plane = &sample[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &mut col[((c * kh + ki) * kw + kj) * oh * ow..((c * kh + ki) * kw + kj + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    grad_col: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    grad_sample: &mut [f64],
) {
    for c in 0..ci {
        let plane = &mut grad_sample[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &grad_col[((c * kh + ki) * kw + kj) * oh * ow..((c * kh + ki) * kw + kj + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &row[oy * ow..(oy + 1) * ow];
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    g: &Tensor,
    stride: usize,
    padding: usize,
) -> (Tensor, Tensor, Tensor) {
    let (n, ci, h, w) = {
        let s = input.shape();
        (s[0], s[1], s[2], s[3])
    };
    let (co, _, kh, kw) = {
        let s = weight.shape();
        (s[0], s[1], s[2], s[3])
    };
    let (oh, ow) = {
        let s = g.shape();
        (s[2], s[3])
    };
    let kdim = ci * kh * kw;
    let pos = oh * ow;
    let mut grad_in = vec![0.0; input.numel()];
    let mut grad_w = vec![0.0; weight.numel()];
    let mut grad_b = vec![0.0; co];
    let mut col = vec![0.0; kdim * pos];
    let mut grad_col = vec![0.0; kdim * pos];
    let in_data = input.data();
    let w_data = weight.data();
    let g_data = g.data();
    for s in 0..n {
        let sample = &in_data[s * ci * h * w..(s + 1) * ci * h * w];
        let g_s = &g_data[s * co * pos..(s + 1) * co * pos];
        im2col(sample, ci, h, w, kh, kw, stride, padding, oh, ow, &mut col);
        // bias: sum over positions
        for c in 0..co {
            let grow = &g_s[c * pos..(c + 1) * pos];
            grad_b[c] += grow.iter().sum::<f64>();
        }
        // dW[c][kd] += Σ_pos g[c][pos] · col[kd][pos]
        for c in 0..co {
            let grow = &g_s[c * pos..(c + 1) * pos];
            let wrow = &mut grad_w[c * kdim..(c + 1) * kdim];
            for kd in 0..kdim {
                let crow = &col[kd * pos..(kd + 1) * pos];
                let mut acc = 0.0;
                for (gv, cv) in grow.iter().zip(crow) {
                    acc += gv * cv;
                }
                wrow[kd] += acc;
            }
        }
        // dcol[kd][pos] = Σ_c w[c][kd] · g[c][pos]
        grad_col.fill(0.0);
        for c in 0..co {
            let grow = &g_s[c * pos..(c + 1) * pos];
            let wrow = &w_data[c * kdim..(c + 1) * kdim];
            for kd in 0..kdim {
                let wv = wrow[kd];
                if wv == 0.0 {
                    continue;
                }
                let dst = &mut grad_col[kd * pos..(kd + 1) * pos];
                for (d, gv) in dst.iter_mut().zip(grow) {
                    *d += wv * gv;
                }
            }
        }
        let gi_s = &mut grad_in[s * ci * h * w..(s + 1) * ci * h * w];
        col2im(&grad_col, ci, h, w, kh, kw, stride, padding, oh, ow, gi_s);
    }
    (
        Tensor::from_vec(input.shape(), grad_in).unwrap(),
        Tensor::from_vec(weight.shape(), grad_w).unwrap(),
        Tensor::from_vec(&[co], grad_b).unwrap(),
    )
}

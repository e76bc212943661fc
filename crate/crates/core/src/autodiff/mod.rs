//! Tape-based reverse-mode differentiation over batched `f64` tensors.
//!
//! A [`Graph`] records every operation of one forward pass. Image tensors use the
//! `[batch, channels, height, width]` layout throughout.

mod kernels;

pub use kernels::{AxisTaps, ConvGeom};

use kernels::{col2im, gemm, im2col, resize_plane, resize_plane_adjoint};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Relu6(Var),
    LeakyRelu(Var, f64),
    Sum(Var),
    SumRows(Var),
    ScaleRows(Var, Vec<f64>),
    MulChannels(Var, Var),
    Concat(Vec<Var>),
    Slice(Var, usize, usize),
    Reshape(Var),
    Conv { x: Var, w: Var, b: Var, geom: ConvGeom },
    ConvTranspose { x: Var, w: Var, b: Var, geom: ConvGeom },
    Resize { x: Var, ty: AxisTaps, tx: AxisTaps },
    Pad(Var, usize),
    AvgPool(Var),
    Linear { x: Var, w: Var, b: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar output with respect to every node that required them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not influence the output.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape().to_vec()))
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives a gradient (parameters, or inputs under test).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `v` cut off from gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(x).map(f);
        let ng = self.requires_grad(x);
        self.push(value, op, ng)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise op on mismatched shapes");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data);
        let ng = self.requires_grad(a) || self.requires_grad(b);
        self.push(value, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Op::Scale(x, s), |v| v * s)
    }

    /// `x + c` for a scalar constant.
    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Offset(x), |v| v + c)
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let neg = self.scale(x, -1.0);
        self.offset(neg, 1.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), f64::ln)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where the bound is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.clamp(lo, hi))
    }

    pub fn relu6(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu6(x), |v| v.clamp(0.0, 6.0))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, Op::LeakyRelu(x, slope), |v| if v > 0.0 { v } else { slope * v })
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let ng = self.requires_grad(x);
        self.push(value, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Per-sample sums: `[n, ...] -> [n]`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let row = v.row_len();
        let data: Vec<f64> = v.data().chunks(row.max(1)).map(|r| r.iter().sum()).collect();
        let value = Tensor::new(vec![v.batch()], data);
        let ng = self.requires_grad(x);
        self.push(value, Op::SumRows(x), ng)
    }

    /// Multiply sample `i` of `x` by the constant `weights[i]`.
    pub fn scale_rows(&mut self, x: Var, weights: Vec<f64>) -> Var {
        let v = self.value(x);
        assert_eq!(v.batch(), weights.len());
        let row = v.row_len();
        let mut value = v.clone();
        for (r, w) in value.data_mut().chunks_mut(row.max(1)).zip(&weights) {
            r.iter_mut().for_each(|e| *e *= w);
        }
        let ng = self.requires_grad(x);
        self.push(value, Op::ScaleRows(x, weights), ng)
    }

    /// `[n, c, h, w] * [n, 1, h, w]`, broadcasting the single-channel factor.
    pub fn mul_channels(&mut self, x: Var, m: Var) -> Var {
        let (vx, vm) = (self.value(x), self.value(m));
        let s = vx.shape();
        assert_eq!(vm.shape(), [s[0], 1, s[2], s[3]], "mask broadcast shape");
        let plane = s[2] * s[3];
        let mut value = vx.clone();
        for (n, sample) in value.data_mut().chunks_mut(s[1] * plane).enumerate() {
            let mrow = &vm.data()[n * plane..(n + 1) * plane];
            for ch in sample.chunks_mut(plane) {
                ch.iter_mut().zip(mrow).for_each(|(a, b)| *a *= b);
            }
        }
        let ng = self.requires_grad(x) || self.requires_grad(m);
        self.push(value, Op::MulChannels(x, m), ng)
    }

    /// Concatenate along axis 1; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let first = self.value(parts[0]).shape().to_vec();
        let n = first[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            assert!(
                s.len() == first.len() && s[0] == n && s[2..] == first[2..],
                "concat of incompatible shapes {first:?} and {s:?}"
            );
            widths.push(self.value(p).row_len());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let mut shape = first.clone();
        shape[1] = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let ng = parts.iter().any(|&p| self.requires_grad(p));
        self.push(Tensor::new(shape, data), Op::Concat(parts.to_vec()), ng)
    }

    /// Channels `start..start + len` along axis 1.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x);
        let s = v.shape().to_vec();
        assert!(start + len <= s[1], "slice out of range");
        let inner: usize = s[2..].iter().product();
        let row = v.row_len();
        let mut data = Vec::with_capacity(s[0] * len * inner);
        for i in 0..s[0] {
            data.extend_from_slice(&v.data()[i * row + start * inner..i * row + (start + len) * inner]);
        }
        let mut shape = s;
        shape[1] = len;
        let ng = self.requires_grad(x);
        self.push(Tensor::new(shape, data), Op::Slice(x, start, len), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let value = self.value(x).clone().reshape(shape);
        let ng = self.requires_grad(x);
        self.push(value, Op::Reshape(x), ng)
    }

    /// Convolution; `w` is `[out_c, in_c, k, k]`, `b` is `[out_c]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Var {
        let vx = self.value(x);
        let n = vx.batch();
        assert_eq!(
            &vx.shape()[1..],
            &[geom.in_c, geom.in_h, geom.in_w],
            "conv input shape"
        );
        let (vw, vb) = (self.value(w), self.value(b));
        let (rows, p) = (geom.col_rows(), geom.col_cols());
        let in_len = geom.in_c * geom.in_h * geom.in_w;
        let mut out = vec![0.0; n * geom.out_c * p];
        let mut cols = vec![0.0; rows * p];
        for i in 0..n {
            let xi = &vx.data()[i * in_len..(i + 1) * in_len];
            let dst = &mut out[i * geom.out_c * p..(i + 1) * geom.out_c * p];
            for (o, plane) in dst.chunks_mut(p).enumerate() {
                plane.fill(vb.data()[o]);
            }
            let src = if geom.is_pointwise() {
                xi
            } else {
                im2col(xi, &geom, &mut cols);
                &cols
            };
            gemm(geom.out_c, rows, p, vw.data(), false, src, false, dst, 1.0);
        }
        let value = Tensor::new(vec![n, geom.out_c, geom.out_h, geom.out_w], out);
        let ng = self.requires_grad(x) || self.requires_grad(w) || self.requires_grad(b);
        self.push(value, Op::Conv { x, w, b, geom }, ng)
    }

    /// Transposed convolution: the adjoint of a convolution with geometry `geom`, which maps
    /// the output shape `[geom.in_c, geom.in_h, geom.in_w]` back onto the input shape
    /// `[geom.out_c, geom.out_h, geom.out_w]`. `w` is `[geom.out_c, geom.in_c, k, k]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Var {
        let vx = self.value(x);
        let n = vx.batch();
        assert_eq!(
            &vx.shape()[1..],
            &[geom.out_c, geom.out_h, geom.out_w],
            "transposed conv input shape"
        );
        let (vw, vb) = (self.value(w), self.value(b));
        let (rows, p) = (geom.col_rows(), geom.col_cols());
        let out_len = geom.in_c * geom.in_h * geom.in_w;
        let in_len = geom.out_c * p;
        let plane = geom.in_h * geom.in_w;
        let mut out = vec![0.0; n * out_len];
        let mut cols = vec![0.0; rows * p];
        for i in 0..n {
            let xi = &vx.data()[i * in_len..(i + 1) * in_len];
            gemm(rows, geom.out_c, p, vw.data(), true, xi, false, &mut cols, 0.0);
            let dst = &mut out[i * out_len..(i + 1) * out_len];
            col2im(&cols, &geom, dst);
            for (c, pl) in dst.chunks_mut(plane).enumerate() {
                pl.iter_mut().for_each(|v| *v += vb.data()[c]);
            }
        }
        let value = Tensor::new(vec![n, geom.in_c, geom.in_h, geom.in_w], out);
        let ng = self.requires_grad(x) || self.requires_grad(w) || self.requires_grad(b);
        self.push(value, Op::ConvTranspose { x, w, b, geom }, ng)
    }

    /// Bilinear resize (half-pixel centers) of every channel to `out_h x out_w`.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let vx = self.value(x);
        let s = vx.shape().to_vec();
        let (ty, tx) = (AxisTaps::new(s[2], out_h), AxisTaps::new(s[3], out_w));
        let (in_plane, out_plane) = (s[2] * s[3], out_h * out_w);
        let mut out = vec![0.0; s[0] * s[1] * out_plane];
        for (src, dst) in vx.data().chunks(in_plane).zip(out.chunks_mut(out_plane)) {
            resize_plane(src, s[3], &ty, &tx, dst);
        }
        let value = Tensor::new(vec![s[0], s[1], out_h, out_w], out);
        let ng = self.requires_grad(x);
        self.push(value, Op::Resize { x, ty, tx }, ng)
    }

    /// Zero padding of `amount` pixels on every spatial side.
    pub fn pad(&mut self, x: Var, amount: usize) -> Var {
        let vx = self.value(x);
        let s = vx.shape().to_vec();
        let (h, w) = (s[2] + 2 * amount, s[3] + 2 * amount);
        let mut out = vec![0.0; s[0] * s[1] * h * w];
        for (src, dst) in vx.data().chunks(s[2] * s[3]).zip(out.chunks_mut(h * w)) {
            for y in 0..s[2] {
                let d = (y + amount) * w + amount;
                dst[d..d + s[3]].copy_from_slice(&src[y * s[3]..(y + 1) * s[3]]);
            }
        }
        let value = Tensor::new(vec![s[0], s[1], h, w], out);
        let ng = self.requires_grad(x);
        self.push(value, Op::Pad(x, amount), ng)
    }

    /// Global spatial average: `[n, c, h, w] -> [n, c]`.
    pub fn avg_pool(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let s = vx.shape().to_vec();
        let plane = s[2] * s[3];
        let data = vx
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let ng = self.requires_grad(x);
        self.push(Tensor::new(vec![s[0], s[1]], data), Op::AvgPool(x), ng)
    }

    /// Fully connected layer on the flattened sample: `w` is `[out, in]`, `b` is `[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let (n, d) = (vx.batch(), vx.row_len());
        let o = vw.shape()[0];
        assert_eq!(vw.shape()[1], d, "linear input width");
        let mut out = Vec::with_capacity(n * o);
        for _ in 0..n {
            out.extend_from_slice(vb.data());
        }
        gemm(n, d, o, vx.data(), false, vw.data(), true, &mut out, 1.0);
        let ng = self.requires_grad(x) || self.requires_grad(w) || self.requires_grad(b);
        self.push(Tensor::new(vec![n, o], out), Op::Linear { x, w, b }, ng)
    }

    /// Per-sample softmax cross-entropy `-log softmax(logits)[label]`, shape `[n]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let v = self.value(logits);
        let (n, k) = (v.batch(), v.row_len());
        assert_eq!(labels.len(), n);
        let mut probs = vec![0.0; n * k];
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let row = &v.data()[i * k..(i + 1) * k];
            let lse = log_sum_exp(row);
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
            assert!(labels[i] < k, "label {} out of range for {} logits", labels[i], k);
            out.push(lse - row[labels[i]]);
        }
        let ng = self.requires_grad(logits);
        self.push(
            Tensor::new(vec![n], out),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// Reverse sweep from a single-element output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::new(self.value(output).shape().to_vec(), vec![1.0]));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, b)| *a += b),
            slot => *slot = Some(g),
        }
    }

    fn elementwise(&self, x: Var, g: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let vx = self.value(x);
        let data = vx.data().iter().zip(g.data()).map(|(&v, &d)| f(v, d)).collect();
        Tensor::new(vx.shape().to_vec(), data)
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let ga = self.elementwise(*b, g, |v, d| v * d);
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let gb = self.elementwise(*a, g, |v, d| v * d);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.accumulate(grads, *x, g.map(|v| v * s));
            }
            Op::Offset(x) | Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, g.clone().reshape(shape));
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let data = y.data().iter().zip(g.data()).map(|(&s, &d)| d * s * (1.0 - s)).collect();
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), data));
            }
            Op::Log(x) => {
                let gx = self.elementwise(*x, g, |v, d| d / v);
                self.accumulate(grads, *x, gx);
            }
            Op::Exp(x) => {
                let y = &node.value;
                let data = y.data().iter().zip(g.data()).map(|(&e, &d)| d * e).collect();
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), data));
            }
            Op::Square(x) => {
                let gx = self.elementwise(*x, g, |v, d| 2.0 * v * d);
                self.accumulate(grads, *x, gx);
            }
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let gx = self.elementwise(*x, g, |v, d| if v < lo || v > hi { 0.0 } else { d });
                self.accumulate(grads, *x, gx);
            }
            Op::Relu6(x) => {
                let gx = self.elementwise(*x, g, |v, d| if v > 0.0 && v < 6.0 { d } else { 0.0 });
                self.accumulate(grads, *x, gx);
            }
            Op::LeakyRelu(x, slope) => {
                let slope = *slope;
                let gx = self.elementwise(*x, g, |v, d| if v > 0.0 { d } else { slope * d });
                self.accumulate(grads, *x, gx);
            }
            Op::Sum(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, Tensor::full(shape, g.item()));
            }
            Op::SumRows(x) => {
                let vx = self.value(*x);
                let row = vx.row_len();
                let mut data = Vec::with_capacity(vx.len());
                for &d in g.data() {
                    data.extend(std::iter::repeat(d).take(row));
                }
                self.accumulate(grads, *x, Tensor::new(vx.shape().to_vec(), data));
            }
            Op::ScaleRows(x, weights) => {
                let row = g.row_len();
                let mut gx = g.clone();
                for (r, w) in gx.data_mut().chunks_mut(row.max(1)).zip(weights) {
                    r.iter_mut().for_each(|e| *e *= w);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::MulChannels(x, m) => self.back_mul_channels(*x, *m, g, grads),
            Op::Concat(parts) => {
                let n = g.batch();
                let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).row_len()).collect();
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    if self.requires_grad(p) {
                        let mut data = Vec::with_capacity(n * w);
                        for i in 0..n {
                            data.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                        }
                        self.accumulate(grads, p, Tensor::new(self.shape(p).to_vec(), data));
                    }
                    offset += w;
                }
            }
            Op::Slice(x, start, len) => {
                let s = self.shape(*x).to_vec();
                let inner: usize = s[2..].iter().product();
                let row = s[1] * inner;
                let mut gx = Tensor::zeros(s.clone());
                for i in 0..s[0] {
                    let dst = i * row + start * inner;
                    gx.data_mut()[dst..dst + len * inner]
                        .copy_from_slice(&g.data()[i * len * inner..(i + 1) * len * inner]);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Conv { x, w, b, geom } => self.back_conv(*x, *w, *b, geom, g, grads),
            Op::ConvTranspose { x, w, b, geom } => self.back_conv_transpose(*x, *w, *b, geom, g, grads),
            Op::Resize { x, ty, tx } => {
                let s = self.shape(*x).to_vec();
                let mut gx = Tensor::zeros(s.clone());
                let out_plane = ty.lo.len() * tx.lo.len();
                for (src, dst) in g.data().chunks(out_plane).zip(gx.data_mut().chunks_mut(s[2] * s[3])) {
                    resize_plane_adjoint(src, s[3], ty, tx, dst);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Pad(x, amount) => {
                let s = self.shape(*x).to_vec();
                let w = s[3] + 2 * amount;
                let h = s[2] + 2 * amount;
                let mut gx = Tensor::zeros(s.clone());
                for (src, dst) in g.data().chunks(h * w).zip(gx.data_mut().chunks_mut(s[2] * s[3])) {
                    for y in 0..s[2] {
                        let o = (y + amount) * w + amount;
                        dst[y * s[3]..(y + 1) * s[3]].copy_from_slice(&src[o..o + s[3]]);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::AvgPool(x) => {
                let s = self.shape(*x).to_vec();
                let plane = s[2] * s[3];
                let mut data = Vec::with_capacity(s.iter().product());
                for &d in g.data() {
                    data.extend(std::iter::repeat(d / plane as f64).take(plane));
                }
                self.accumulate(grads, *x, Tensor::new(s, data));
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (n, d) = (vx.batch(), vx.row_len());
                let o = vw.shape()[0];
                if self.requires_grad(*x) {
                    let mut gx = vec![0.0; n * d];
                    gemm(n, o, d, g.data(), false, vw.data(), false, &mut gx, 0.0);
                    self.accumulate(grads, *x, Tensor::new(vx.shape().to_vec(), gx));
                }
                if self.requires_grad(*w) {
                    let mut gw = vec![0.0; o * d];
                    gemm(o, n, d, g.data(), true, vx.data(), false, &mut gw, 0.0);
                    self.accumulate(grads, *w, Tensor::new(vw.shape().to_vec(), gw));
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; o];
                    for r in g.data().chunks(o) {
                        gb.iter_mut().zip(r).for_each(|(a, v)| *a += v);
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![o], gb));
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.value(*logits).row_len();
                let mut gl = probs.clone();
                for (i, (&label, &d)) in labels.iter().zip(g.data()).enumerate() {
                    gl[i * k + label] -= 1.0;
                    gl[i * k..(i + 1) * k].iter_mut().for_each(|v| *v *= d);
                }
                let shape = self.shape(*logits).to_vec();
                self.accumulate(grads, *logits, Tensor::new(shape, gl));
            }
        }
    }

    fn back_mul_channels(&self, x: Var, m: Var, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (vx, vm) = (self.value(x), self.value(m));
        let s = vx.shape();
        let plane = s[2] * s[3];
        if self.requires_grad(x) {
            let mut gx = g.clone();
            for (n, sample) in gx.data_mut().chunks_mut(s[1] * plane).enumerate() {
                let mrow = &vm.data()[n * plane..(n + 1) * plane];
                for ch in sample.chunks_mut(plane) {
                    ch.iter_mut().zip(mrow).for_each(|(a, b)| *a *= b);
                }
            }
            self.accumulate(grads, x, gx);
        }
        if self.requires_grad(m) {
            let mut gm = Tensor::zeros(vm.shape().to_vec());
            for n in 0..s[0] {
                let dst = &mut gm.data_mut()[n * plane..(n + 1) * plane];
                for c in 0..s[1] {
                    let off = (n * s[1] + c) * plane;
                    let (xs, gs) = (&vx.data()[off..off + plane], &g.data()[off..off + plane]);
                    for ((d, a), b) in dst.iter_mut().zip(xs).zip(gs) {
                        *d += a * b;
                    }
                }
            }
            self.accumulate(grads, m, gm);
        }
    }

    fn back_conv(&self, x: Var, w: Var, b: Var, geom: &ConvGeom, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (vx, vw) = (self.value(x), self.value(w));
        let n = vx.batch();
        let (rows, p) = (geom.col_rows(), geom.col_cols());
        let in_len = geom.in_c * geom.in_h * geom.in_w;
        let out_len = geom.out_c * p;
        let (need_x, need_w) = (self.requires_grad(x), self.requires_grad(w));
        let mut gx = need_x.then(|| vec![0.0; n * in_len]);
        let mut gw = need_w.then(|| vec![0.0; geom.out_c * rows]);
        let mut cols = vec![0.0; rows * p];
        let mut dcols = vec![0.0; rows * p];
        for i in 0..n {
            let gi = &g.data()[i * out_len..(i + 1) * out_len];
            let xi = &vx.data()[i * in_len..(i + 1) * in_len];
            if let Some(gw) = gw.as_mut() {
                let src = if geom.is_pointwise() {
                    xi
                } else {
                    im2col(xi, geom, &mut cols);
                    &cols
                };
                gemm(geom.out_c, p, rows, gi, false, src, true, gw, 1.0);
            }
            if let Some(gx) = gx.as_mut() {
                let dst = &mut gx[i * in_len..(i + 1) * in_len];
                if geom.is_pointwise() {
                    gemm(rows, geom.out_c, p, vw.data(), true, gi, false, dst, 0.0);
                } else {
                    gemm(rows, geom.out_c, p, vw.data(), true, gi, false, &mut dcols, 0.0);
                    col2im(&dcols, geom, dst);
                }
            }
        }
        if let Some(gx) = gx {
            self.accumulate(grads, x, Tensor::new(vx.shape().to_vec(), gx));
        }
        if let Some(gw) = gw {
            self.accumulate(grads, w, Tensor::new(vw.shape().to_vec(), gw));
        }
        if self.requires_grad(b) {
            let mut gb = vec![0.0; geom.out_c];
            for (j, plane) in g.data().chunks(p).enumerate() {
                gb[j % geom.out_c] += plane.iter().sum::<f64>();
            }
            self.accumulate(grads, b, Tensor::new(vec![geom.out_c], gb));
        }
    }

    fn back_conv_transpose(
        &self,
        x: Var,
        w: Var,
        b: Var,
        geom: &ConvGeom,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (vx, vw) = (self.value(x), self.value(w));
        let n = vx.batch();
        let (rows, p) = (geom.col_rows(), geom.col_cols());
        let out_len = geom.in_c * geom.in_h * geom.in_w;
        let in_len = geom.out_c * p;
        let (need_x, need_w) = (self.requires_grad(x), self.requires_grad(w));
        let mut gx = need_x.then(|| vec![0.0; n * in_len]);
        let mut gw = need_w.then(|| vec![0.0; geom.out_c * rows]);
        let mut dcols = vec![0.0; rows * p];
        for i in 0..n {
            let gi = &g.data()[i * out_len..(i + 1) * out_len];
            im2col(gi, geom, &mut dcols);
            if let Some(gw) = gw.as_mut() {
                let xi = &vx.data()[i * in_len..(i + 1) * in_len];
                gemm(geom.out_c, p, rows, xi, false, &dcols, true, gw, 1.0);
            }
            if let Some(gx) = gx.as_mut() {
                let dst = &mut gx[i * in_len..(i + 1) * in_len];
                gemm(geom.out_c, rows, p, vw.data(), false, &dcols, false, dst, 0.0);
            }
        }
        if let Some(gx) = gx {
            self.accumulate(grads, x, Tensor::new(vx.shape().to_vec(), gx));
        }
        if let Some(gw) = gw {
            self.accumulate(grads, w, Tensor::new(vw.shape().to_vec(), gw));
        }
        if self.requires_grad(b) {
            let plane = geom.in_h * geom.in_w;
            let mut gb = vec![0.0; geom.in_c];
            for (j, pl) in g.data().chunks(plane).enumerate() {
                gb[j % geom.in_c] += pl.iter().sum::<f64>();
            }
            self.accumulate(grads, b, Tensor::new(vec![geom.in_c], gb));
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

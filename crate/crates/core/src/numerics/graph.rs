//! Tape-based reverse-mode automatic differentiation.
//!
//! Nodes are appended in evaluation order, so the tape is already a topological
//! order and `backward` is a single reverse sweep. A graph built with
//! [`Graph::inference`] evaluates the same ops without recording gradients.

use std::collections::HashMap;

use super::kernels::{gemm, Window};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddBroadcast(usize, usize),
    AddChannel(usize, usize),
    MulChannel(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Silu(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Softmax(usize),
    MaskedSoftmax(usize),
    MaskedLogSoftmax(usize, Vec<bool>),
    Sum(usize),
    Mean(usize),
    Gather(usize, Vec<usize>),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        win: Window,
    },
    ConvTranspose2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        win: Window,
    },
    Concat(Vec<usize>),
    Upsample(usize, usize),
    Mse(usize, usize),
    Clamp(usize, f64, f64),
    Minimum(usize, usize),
    Reshape(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation graph (tape).
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<(u64, usize), Var>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn shape_err(op: &'static str, shapes: &[&[usize]]) -> Error {
    Error::Shape {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A graph that evaluates ops but never records gradients.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, parents: &[usize]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = self.grad_enabled && parents.iter().any(|&p| self.nodes[p].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Bind a parameter; repeated calls within one graph return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.uid(), id.index());
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let v = self.leaf(store.get(id).clone(), true);
        self.bound.insert(key, v);
        v
    }

    /// Gradient of every parameter in `store`; parameters not reached by the loss get zeros.
    pub fn param_grads(&self, grads: &Gradients, store: &ParamStore) -> Vec<Tensor> {
        store
            .values()
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let g = self
                    .bound
                    .get(&(store.uid(), i))
                    .and_then(|&v| grads.get(v))
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.len()]);
                Tensor::new(t.shape(), g).expect("gradient shape")
            })
            .collect()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.val(a.0).shape(), self.val(b.0).shape());
        if sa != sb {
            return Err(shape_err(op, &[sa, sb]));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.val(a.0), self.val(b.0));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data).expect("same shape")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.val(a.0).shape(), self.val(b.0).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", &[sa, sb]));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.val(a.0).data(),
            false,
            self.val(b.0).data(),
            false,
            &mut out,
            0.0,
        );
        self.push("matmul", Tensor::new(&[m, n], out)?, Op::MatMul(a.0, b.0), &[a.0, b.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_map(a, b, |x, y| x + y);
        self.push("add", t, Op::Add(a.0, b.0), &[a.0, b.0])
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s shape.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.val(a.0).shape(), self.val(b.0).shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb || sb.is_empty() {
            return Err(shape_err("add_broadcast", &[sa, sb]));
        }
        let bd = self.val(b.0).data();
        let n = bd.len();
        let data = self
            .val(a.0)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % n])
            .collect();
        let t = Tensor::new(sa, data)?;
        self.push("add_broadcast", t, Op::AddBroadcast(a.0, b.0), &[a.0, b.0])
    }

    /// Add a per-(sample, channel) offset `e: [N, C]` to `x: [N, C, ...]`.
    pub fn add_channel(&mut self, x: Var, e: Var) -> Result<Var> {
        let (sx, se) = (self.val(x.0).shape(), self.val(e.0).shape());
        if sx.len() < 2 || se != [sx[0], sx[1]] {
            return Err(shape_err("add_channel", &[sx, se]));
        }
        let inner: usize = sx[2..].iter().product();
        let ed = self.val(e.0).data();
        let data = self
            .val(x.0)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + ed[i / inner])
            .collect();
        let t = Tensor::new(sx, data)?;
        self.push("add_channel", t, Op::AddChannel(x.0, e.0), &[x.0, e.0])
    }

    /// Scale `x: [N, C, ...]` by a per-(sample, channel) factor `e: [N, C]`.
    pub fn mul_channel(&mut self, x: Var, e: Var) -> Result<Var> {
        let (sx, se) = (self.val(x.0).shape(), self.val(e.0).shape());
        if sx.len() < 2 || se != [sx[0], sx[1]] {
            return Err(shape_err("mul_channel", &[sx, se]));
        }
        let inner: usize = sx[2..].iter().product();
        let ed = self.val(e.0).data();
        let data = self
            .val(x.0)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * ed[i / inner])
            .collect();
        let t = Tensor::new(sx, data)?;
        self.push("mul_channel", t, Op::MulChannel(x.0, e.0), &[x.0, e.0])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_map(a, b, |x, y| x - y);
        self.push("sub", t, Op::Sub(a.0, b.0), &[a.0, b.0])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_map(a, b, |x, y| x * y);
        self.push("mul", t, Op::Mul(a.0, b.0), &[a.0, b.0])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.val(a.0).map(|x| x * c);
        self.push("scale", t, Op::Scale(a.0, c), &[a.0])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.val(a.0).map(|x| x + c);
        self.push("add_scalar", t, Op::AddScalar(a.0), &[a.0])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a.0).map(|x| x.max(0.0));
        self.push("relu", t, Op::Relu(a.0), &[a.0])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a.0).map(|x| x * sigmoid(x));
        self.push("silu", t, Op::Silu(a.0), &[a.0])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a.0).map(sigmoid);
        self.push("sigmoid", t, Op::Sigmoid(a.0), &[a.0])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a.0).map(f64::exp);
        self.push("exp", t, Op::Exp(a.0), &[a.0])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a.0).map(f64::ln);
        self.push("log", t, Op::Log(a.0), &[a.0])
    }

    fn rows(&self, op: &'static str, a: Var) -> Result<(usize, usize)> {
        let s = self.val(a.0).shape();
        match s.last() {
            Some(&k) if k > 0 => Ok((self.val(a.0).len() / k, k)),
            _ => Err(shape_err(op, &[s])),
        }
    }

    fn softmax_rows(data: &[f64], k: usize, mask: Option<&[bool]>, log: bool) -> Result<Vec<f64>> {
        let mut out = vec![0.0; data.len()];
        for (r, row) in data.chunks(k).enumerate() {
            let live = |j: usize| mask.is_none_or(|m| m[r * k + j]);
            let max = (0..k)
                .filter(|&j| live(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::InvalidArgument(format!("softmax row {r} has no feasible entry")));
            }
            let z: f64 = (0..k).filter(|&j| live(j)).map(|j| (row[j] - max).exp()).sum();
            let lz = z.ln();
            for j in (0..k).filter(|&j| live(j)) {
                out[r * k + j] = if log {
                    row[j] - max - lz
                } else {
                    (row[j] - max).exp() / z
                };
            }
        }
        Ok(out)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (_, k) = self.rows("softmax", a)?;
        let data = Self::softmax_rows(self.val(a.0).data(), k, None, false)?;
        let t = Tensor::new(self.val(a.0).shape(), data)?;
        self.push("softmax", t, Op::Softmax(a.0), &[a.0])
    }

    /// Softmax over the last axis restricted to `mask`; masked entries are exactly 0.
    pub fn masked_softmax(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let (_, k) = self.rows("masked_softmax", a)?;
        if mask.len() != self.val(a.0).len() {
            return Err(shape_err("masked_softmax", &[self.val(a.0).shape(), &[mask.len()]]));
        }
        let data = Self::softmax_rows(self.val(a.0).data(), k, Some(mask), false)?;
        let t = Tensor::new(self.val(a.0).shape(), data)?;
        self.push("masked_softmax", t, Op::MaskedSoftmax(a.0), &[a.0])
    }

    /// Log-softmax restricted to `mask`; masked entries hold 0 (they carry no probability mass).
    pub fn masked_log_softmax(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let (_, k) = self.rows("masked_log_softmax", a)?;
        if mask.len() != self.val(a.0).len() {
            return Err(shape_err("masked_log_softmax", &[self.val(a.0).shape(), &[mask.len()]]));
        }
        let data = Self::softmax_rows(self.val(a.0).data(), k, Some(mask), true)?;
        let t = Tensor::new(self.val(a.0).shape(), data)?;
        self.push(
            "masked_log_softmax",
            t,
            Op::MaskedLogSoftmax(a.0, mask.to_vec()),
            &[a.0],
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let t = Tensor::scalar(self.val(a.0).data().iter().sum());
        self.push("sum", t, Op::Sum(a.0), &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.val(a.0).len();
        if n == 0 {
            return Err(shape_err("mean", &[self.val(a.0).shape()]));
        }
        let t = Tensor::scalar(self.val(a.0).data().iter().sum::<f64>() / n as f64);
        self.push("mean", t, Op::Mean(a.0), &[a.0])
    }

    /// Pick `a[r, idx[r]]` from a `[rows, K]` tensor.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let s = self.val(a.0).shape();
        if s.len() != 2 || idx.len() != s[0] || idx.iter().any(|&i| i >= s[1]) {
            return Err(shape_err("gather", &[s, &[idx.len()]]));
        }
        let k = s[1];
        let d = self.val(a.0).data();
        let t = Tensor::new(
            &[idx.len()],
            idx.iter().enumerate().map(|(r, &i)| d[r * k + i]).collect(),
        )?;
        self.push("gather", t, Op::Gather(a.0, idx.to_vec()), &[a.0])
    }

    fn conv_bias_check(&self, op: &'static str, b: Option<Var>, channels: usize) -> Result<()> {
        if let Some(b) = b {
            if self.val(b.0).shape() != [channels] {
                return Err(shape_err(op, &[self.val(b.0).shape(), &[channels]]));
            }
        }
        Ok(())
    }

    /// 2-D convolution, `x: [N, C, H, W]`, `w: [O, C, kh, kw]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.val(x.0).shape().to_vec(), self.val(w.0).shape().to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(shape_err("conv2d", &[&sx, &sw]));
        }
        let win = Window::new(sx[1], sx[2], sx[3], sw[2], sw[3], stride, padding)
            .ok_or_else(|| shape_err("conv2d", &[&sx, &sw]))?;
        self.conv_bias_check("conv2d", b, sw[0])?;
        let (n, o) = (sx[0], sw[0]);
        let (rows, cols) = (win.col_rows(), win.col_cols());
        let in_len = sx[1] * sx[2] * sx[3];
        let mut out = vec![0.0; n * o * cols];
        let mut col = vec![0.0; rows * cols];
        for i in 0..n {
            win.im2col(&self.val(x.0).data()[i * in_len..(i + 1) * in_len], &mut col);
            gemm(
                o,
                rows,
                cols,
                self.val(w.0).data(),
                false,
                &col,
                false,
                &mut out[i * o * cols..(i + 1) * o * cols],
                0.0,
            );
        }
        if let Some(b) = b {
            let bd = self.val(b.0).data();
            out.chunks_mut(cols)
                .enumerate()
                .for_each(|(r, ch)| ch.iter_mut().for_each(|v| *v += bd[r % o]));
        }
        let t = Tensor::new(&[n, o, win.out_h, win.out_w], out)?;
        let mut parents = vec![x.0, w.0];
        parents.extend(b.map(|b| b.0));
        self.push(
            "conv2d",
            t,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                win,
            },
            &parents,
        )
    }

    /// Transposed convolution, `x: [N, Ci, H, W]`, `w: [Ci, Co, kh, kw]`;
    /// output side is `(H - 1) * stride - 2 * padding + kh`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.val(x.0).shape().to_vec(), self.val(w.0).shape().to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] || stride == 0 {
            return Err(shape_err("conv_transpose2d", &[&sx, &sw]));
        }
        let oh = ((sx[2] - 1) * stride + sw[2]).checked_sub(2 * padding);
        let ow = ((sx[3] - 1) * stride + sw[3]).checked_sub(2 * padding);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(shape_err("conv_transpose2d", &[&sx, &sw]));
        };
        let win = Window::new(sw[1], oh, ow, sw[2], sw[3], stride, padding)
            .filter(|w| w.out_h == sx[2] && w.out_w == sx[3])
            .ok_or_else(|| shape_err("conv_transpose2d", &[&sx, &sw]))?;
        self.conv_bias_check("conv_transpose2d", b, sw[1])?;
        let (n, ci, co) = (sx[0], sx[1], sw[1]);
        let (rows, cols) = (win.col_rows(), win.col_cols());
        let out_len = co * oh * ow;
        let mut out = vec![0.0; n * out_len];
        let mut col = vec![0.0; rows * cols];
        for i in 0..n {
            let xi = &self.val(x.0).data()[i * ci * cols..(i + 1) * ci * cols];
            gemm(rows, ci, cols, self.val(w.0).data(), true, xi, false, &mut col, 0.0);
            win.col2im(&col, &mut out[i * out_len..(i + 1) * out_len]);
        }
        if let Some(b) = b {
            let bd = self.val(b.0).data();
            out.chunks_mut(oh * ow)
                .enumerate()
                .for_each(|(r, ch)| ch.iter_mut().for_each(|v| *v += bd[r % co]));
        }
        let t = Tensor::new(&[n, co, oh, ow], out)?;
        let mut parents = vec![x.0, w.0];
        parents.extend(b.map(|b| b.0));
        self.push(
            "conv_transpose2d",
            t,
            Op::ConvTranspose2d {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                win,
            },
            &parents,
        )
    }

    /// Concatenate `[N, C_i, ...]` tensors along axis 1.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self
            .val(parts.first().ok_or_else(|| shape_err("concat", &[]))?.0)
            .shape()
            .to_vec();
        if first.len() < 2 {
            return Err(shape_err("concat", &[&first]));
        }
        let mut channels = 0;
        for p in parts {
            let s = self.val(p.0).shape();
            if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                return Err(shape_err("concat", &[&first, s]));
            }
            channels += s[1];
        }
        let n = first[0];
        let inner: usize = first[2..].iter().product();
        let mut out = Vec::with_capacity(n * channels * inner);
        for i in 0..n {
            for p in parts {
                let t = self.val(p.0);
                let c = t.shape()[1];
                out.extend_from_slice(&t.data()[i * c * inner..(i + 1) * c * inner]);
            }
        }
        let mut shape = first.clone();
        shape[1] = channels;
        let t = Tensor::new(&shape, out)?;
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push("concat", t, Op::Concat(idx.clone()), &idx)
    }

    /// Nearest-neighbour upsampling of `[N, C, H, W]` by an integer factor.
    pub fn upsample_nearest(&mut self, a: Var, factor: usize) -> Result<Var> {
        let s = self.val(a.0).shape().to_vec();
        if s.len() != 4 || factor == 0 {
            return Err(shape_err("upsample_nearest", &[&s]));
        }
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = (h * factor, w * factor);
        let d = self.val(a.0).data();
        let mut out = vec![0.0; s[0] * s[1] * oh * ow];
        for (plane, dst) in d.chunks(h * w).zip(out.chunks_mut(oh * ow)) {
            for y in 0..oh {
                for x in 0..ow {
                    dst[y * ow + x] = plane[(y / factor) * w + x / factor];
                }
            }
        }
        let t = Tensor::new(&[s[0], s[1], oh, ow], out)?;
        self.push("upsample_nearest", t, Op::Upsample(a.0, factor), &[a.0])
    }

    /// Mean squared error between equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (ta, tb) = (self.val(a.0), self.val(b.0));
        let n = ta.len().max(1) as f64;
        let v = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        self.push("mse", Tensor::scalar(v), Op::Mse(a.0, b.0), &[a.0, b.0])
    }

    /// Elementwise clamp to `[lo, hi]`; gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let t = self.val(a.0).map(|x| x.clamp(lo, hi));
        self.push("clamp", t, Op::Clamp(a.0, lo, hi), &[a.0])
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("minimum", a, b)?;
        let t = self.zip_map(a, b, f64::min);
        self.push("minimum", t, Op::Minimum(a.0, b.0), &[a.0, b.0])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.val(a.0).clone().reshape(shape)?;
        self.push("reshape", t, Op::Reshape(a.0), &[a.0])
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ls = self.val(loss.0);
        if ls.len() != 1 {
            return Err(Error::NonScalarLoss(ls.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], idx: usize, contribution: &[f64]) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        match &mut grads[idx] {
            Some(g) => add_into(g, contribution),
            slot @ None => *slot = Some(contribution.to_vec()),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Vec<f64>>], idx: usize, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        let n = self.nodes[idx].value.len();
        let g = grads[idx].get_or_insert_with(|| vec![0.0; n]);
        f(g);
    }

    fn unary(&self, grads: &mut [Option<Vec<f64>>], a: usize, g: &[f64], d: impl Fn(usize) -> f64) {
        self.acc_with(grads, a, |ga| {
            ga.iter_mut()
                .zip(g)
                .enumerate()
                .for_each(|(i, (x, gi))| *x += gi * d(i))
        });
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = self.nodes[i].value.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.val(*a).shape(), self.val(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.nodes[*a].requires_grad {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, self.val(*b).data(), true, &mut da, 0.0);
                    self.acc(grads, *a, &da);
                }
                if self.nodes[*b].requires_grad {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.val(*a).data(), true, g, false, &mut db, 0.0);
                    self.acc(grads, *b, &db);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g);
                self.acc(grads, *b, g);
            }
            Op::AddBroadcast(a, b) => {
                self.acc(grads, *a, g);
                let n = self.val(*b).len();
                self.acc_with(grads, *b, |gb| g.iter().enumerate().for_each(|(j, v)| gb[j % n] += v));
            }
            Op::AddChannel(x, e) => {
                self.acc(grads, *x, g);
                let s = self.val(*x).shape();
                let inner: usize = s[2..].iter().product();
                self.acc_with(grads, *e, |ge| {
                    g.iter().enumerate().for_each(|(j, v)| ge[j / inner] += v)
                });
            }
            Op::MulChannel(x, e) => {
                let (vx, ve) = (self.val(*x).data(), self.val(*e).data());
                let inner: usize = self.val(*x).shape()[2..].iter().product();
                let dx: Vec<f64> = g.iter().enumerate().map(|(j, v)| v * ve[j / inner]).collect();
                self.acc(grads, *x, &dx);
                self.acc_with(grads, *e, |ge| {
                    g.iter()
                        .zip(vx)
                        .enumerate()
                        .for_each(|(j, (v, xv))| ge[j / inner] += v * xv)
                });
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.acc(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(*a).data(), self.val(*b).data());
                let da: Vec<f64> = g.iter().zip(vb).map(|(x, y)| x * y).collect();
                let db: Vec<f64> = g.iter().zip(va).map(|(x, y)| x * y).collect();
                self.acc(grads, *a, &da);
                self.acc(grads, *b, &db);
            }
            Op::Scale(a, c) => self.unary(grads, *a, g, |_| *c),
            Op::AddScalar(a) => self.acc(grads, *a, g),
            Op::Relu(a) => {
                let x = self.val(*a).data();
                self.unary(grads, *a, g, |j| if x[j] > 0.0 { 1.0 } else { 0.0 });
            }
            Op::Silu(a) => {
                let x = self.val(*a).data();
                self.unary(grads, *a, g, |j| {
                    let s = sigmoid(x[j]);
                    s * (1.0 + x[j] * (1.0 - s))
                });
            }
            Op::Sigmoid(a) => self.unary(grads, *a, g, |j| out[j] * (1.0 - out[j])),
            Op::Exp(a) => self.unary(grads, *a, g, |j| out[j]),
            Op::Log(a) => {
                let x = self.val(*a).data();
                self.unary(grads, *a, g, |j| 1.0 / x[j]);
            }
            Op::Softmax(a) | Op::MaskedSoftmax(a) => {
                let k = *self.val(*a).shape().last().unwrap();
                let mut d = vec![0.0; g.len()];
                for ((dr, gr), yr) in d.chunks_mut(k).zip(g.chunks(k)).zip(out.chunks(k)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..k {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(grads, *a, &d);
            }
            Op::MaskedLogSoftmax(a, mask) => {
                let k = *self.val(*a).shape().last().unwrap();
                let mut d = vec![0.0; g.len()];
                for (r, (dr, gr)) in d.chunks_mut(k).zip(g.chunks(k)).enumerate() {
                    let live = &mask[r * k..(r + 1) * k];
                    let gsum: f64 = (0..k).filter(|&j| live[j]).map(|j| gr[j]).sum();
                    for j in (0..k).filter(|&j| live[j]) {
                        dr[j] = gr[j] - out[r * k + j].exp() * gsum;
                    }
                }
                self.acc(grads, *a, &d);
            }
            Op::Sum(a) => self.acc_with(grads, *a, |ga| ga.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(a) => {
                let n = self.val(*a).len() as f64;
                self.acc_with(grads, *a, |ga| ga.iter_mut().for_each(|v| *v += g[0] / n));
            }
            Op::Gather(a, idx) => {
                let k = self.val(*a).shape()[1];
                self.acc_with(grads, *a, |ga| {
                    idx.iter().enumerate().for_each(|(r, &j)| ga[r * k + j] += g[r])
                });
            }
            Op::Conv2d { x, w, b, win } => self.conv2d_backward(g, *x, *w, *b, win, grads),
            Op::ConvTranspose2d { x, w, b, win } => self.conv_transpose2d_backward(g, *x, *w, *b, win, grads),
            Op::Concat(parts) => {
                let s = self.nodes[i].value.shape();
                let (n, total) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                let mut offset = 0;
                for &p in parts {
                    let c = self.val(p).shape()[1];
                    self.acc_with(grads, p, |gp| {
                        for smp in 0..n {
                            let src = &g[(smp * total + offset) * inner..(smp * total + offset + c) * inner];
                            add_into(&mut gp[smp * c * inner..(smp + 1) * c * inner], src);
                        }
                    });
                    offset += c;
                }
            }
            Op::Upsample(a, f) => {
                let s = self.val(*a).shape();
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (h * f, w * f);
                self.acc_with(grads, *a, |ga| {
                    for (plane, src) in ga.chunks_mut(h * w).zip(g.chunks(oh * ow)) {
                        for y in 0..oh {
                            for x in 0..ow {
                                plane[(y / f) * w + x / f] += src[y * ow + x];
                            }
                        }
                    }
                });
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.val(*a).data(), self.val(*b).data());
                let c = 2.0 * g[0] / va.len().max(1) as f64;
                let da: Vec<f64> = va.iter().zip(vb).map(|(x, y)| c * (x - y)).collect();
                let db: Vec<f64> = da.iter().map(|v| -v).collect();
                self.acc(grads, *a, &da);
                self.acc(grads, *b, &db);
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.val(*a).data();
                self.unary(grads, *a, g, |j| if x[j] >= *lo && x[j] <= *hi { 1.0 } else { 0.0 });
            }
            Op::Minimum(a, b) => {
                let (va, vb) = (self.val(*a).data(), self.val(*b).data());
                let da: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(j, v)| if va[j] <= vb[j] { *v } else { 0.0 })
                    .collect();
                let db: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(j, v)| if va[j] <= vb[j] { 0.0 } else { *v })
                    .collect();
                self.acc(grads, *a, &da);
                self.acc(grads, *b, &db);
            }
            Op::Reshape(a) => self.acc(grads, *a, g),
        }
    }

    fn bias_backward(
        &self,
        g: &[f64],
        b: Option<usize>,
        channels: usize,
        plane: usize,
        grads: &mut [Option<Vec<f64>>],
    ) {
        if let Some(b) = b {
            self.acc_with(grads, b, |gb| {
                g.chunks(plane)
                    .enumerate()
                    .for_each(|(r, ch)| gb[r % channels] += ch.iter().sum::<f64>())
            });
        }
    }

    fn conv2d_backward(
        &self,
        g: &[f64],
        x: usize,
        w: usize,
        b: Option<usize>,
        win: &Window,
        grads: &mut [Option<Vec<f64>>],
    ) {
        let sx = self.val(x).shape();
        let o = self.val(w).shape()[0];
        let n = sx[0];
        let (rows, cols) = (win.col_rows(), win.col_cols());
        let in_len = sx[1] * sx[2] * sx[3];
        let wd = self.val(w).data();
        let xd = self.val(x).data();
        let mut col = vec![0.0; rows * cols];
        if self.nodes[w].requires_grad {
            let mut dw = vec![0.0; o * rows];
            for i in 0..n {
                win.im2col(&xd[i * in_len..(i + 1) * in_len], &mut col);
                gemm(
                    o,
                    cols,
                    rows,
                    &g[i * o * cols..(i + 1) * o * cols],
                    false,
                    &col,
                    true,
                    &mut dw,
                    1.0,
                );
            }
            self.acc(grads, w, &dw);
        }
        if self.nodes[x].requires_grad {
            let mut dx = vec![0.0; n * in_len];
            for i in 0..n {
                gemm(
                    rows,
                    o,
                    cols,
                    wd,
                    true,
                    &g[i * o * cols..(i + 1) * o * cols],
                    false,
                    &mut col,
                    0.0,
                );
                win.col2im(&col, &mut dx[i * in_len..(i + 1) * in_len]);
            }
            self.acc(grads, x, &dx);
        }
        self.bias_backward(g, b, o, cols, grads);
    }

    fn conv_transpose2d_backward(
        &self,
        g: &[f64],
        x: usize,
        w: usize,
        b: Option<usize>,
        win: &Window,
        grads: &mut [Option<Vec<f64>>],
    ) {
        let sx = self.val(x).shape();
        let (n, ci) = (sx[0], sx[1]);
        let co = win.channels;
        let (rows, cols) = (win.col_rows(), win.col_cols());
        let out_len = co * win.height * win.width;
        let wd = self.val(w).data();
        let xd = self.val(x).data();
        let mut dcol = vec![0.0; rows * cols];
        let mut dw = vec![0.0; ci * rows];
        let mut dx = vec![0.0; n * ci * cols];
        for i in 0..n {
            win.im2col(&g[i * out_len..(i + 1) * out_len], &mut dcol);
            if self.nodes[x].requires_grad {
                gemm(
                    ci,
                    rows,
                    cols,
                    wd,
                    false,
                    &dcol,
                    false,
                    &mut dx[i * ci * cols..(i + 1) * ci * cols],
                    0.0,
                );
            }
            if self.nodes[w].requires_grad {
                gemm(
                    ci,
                    cols,
                    rows,
                    &xd[i * ci * cols..(i + 1) * ci * cols],
                    false,
                    &dcol,
                    true,
                    &mut dw,
                    1.0,
                );
            }
        }
        self.acc(grads, x, &dx);
        self.acc(grads, w, &dw);
        self.bias_backward(g, b, co, win.height * win.width, grads);
    }
}

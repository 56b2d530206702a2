//! Reverse-mode differentiation over a recorded forward computation.
//!
//! A [`Graph`] is an append-only tape. Every operation pushes a node holding
//! its forward value; [`Graph::backward`] walks the tape in reverse and
//! accumulates `d loss / d node` into every node that requires a gradient.

use crate::diff::params::ParamStore;
use crate::diff::tensor::{conv2d_backward_raw, conv2d_raw, matmul_raw, transpose_raw, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Conv2d { input: Var, kernel: Var, bias: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Abs(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    ChannelMean(Var),
    AddChannel(Var, Var),
    Concat(Var, Var),
    Crop(Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bindings: Vec<(Var, String)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, value: Tensor, op: Op, parent: Var) -> Var {
        let rg = self.nodes[parent.0].requires_grad;
        self.push(value, op, rg)
    }

    fn binary(&mut self, value: Tensor, op: Op, a: Var, b: Var) -> Var {
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push(value, op, rg)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Free leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a named parameter from `store`. Frozen parameters enter the
    /// graph as constants.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store
            .get(name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown parameter `{name}`")))?
            .clone();
        if store.is_frozen(name) {
            return Ok(self.constant(value));
        }
        let v = self.leaf(value);
        self.bindings.push((v, name.to_string()));
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated at `v` by the last [`Graph::backward`], if any.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| {
            Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape matches value")
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self.binary(value, Op::MatMul(a, b), a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::Dimension(format!("transpose needs a matrix, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let value = Tensor::new(vec![c, r], transpose_raw(self.value(a).data(), r, c))?;
        Ok(self.unary(value, Op::Transpose(a), a))
    }

    /// Same-size cross-correlation with zero padding.
    ///
    /// `input`: `[c_in, h, w]`, `kernel`: `[c_out, c_in, k, k]` with odd `k`,
    /// `bias`: `[c_out]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (si, sk, sb) = (self.shape(input), self.shape(kernel), self.shape(bias));
        if sk.len() != 4 || sk[2] != sk[3] {
            return Err(Error::Dimension(format!(
                "conv2d kernel must be [c_out, c_in, k, k], got {sk:?}"
            )));
        }
        if sk[2] % 2 == 0 {
            return Err(Error::UnsupportedKernel(sk[2]));
        }
        if si.len() != 3 || si[0] != sk[1] {
            return Err(Error::shape("conv2d", si, sk));
        }
        if sb != [sk[0]] {
            return Err(Error::shape("conv2d bias", sk, sb));
        }
        let (c_in, h, w) = (si[0], si[1], si[2]);
        let (c_out, k) = (sk[0], sk[2]);
        let data = conv2d_raw(
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
            c_in,
            h,
            w,
            c_out,
            k,
        );
        let value = Tensor::new(vec![c_out, h, w], data)?;
        let rg = [input, kernel, bias]
            .iter()
            .any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, Op::Conv2d { input, kernel, bias }, rg))
    }

    fn zip_with(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
            .expect("map preserves shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.binary(value, Op::Add(a, b), a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.binary(value, Op::Sub(a, b), a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.binary(value, Op::Mul(a, b), a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("div", a, b, |x, y| x / y)?;
        Ok(self.binary(value, Op::Div(a, b), a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.map(a, |x| x * s);
        self.unary(value, Op::Scale(a, s), a)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.map(a, |x| x + s);
        self.unary(value, Op::AddScalar(a), a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.map(a, f64::tanh);
        self.unary(value, Op::Tanh(a), a)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.map(a, f64::abs);
        self.unary(value, Op::Abs(a), a)
    }

    /// Softmax over all entries of `a`, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let value = softmax_tensor(self.value(a));
        self.unary(value, Op::Softmax(a), a)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.unary(Tensor::scalar(s), Op::Sum(a), a)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.unary(Tensor::scalar(m), Op::Mean(a), a)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.unary(value, Op::Reshape(a), a))
    }

    /// Global average pooling of a `[c, h, w]` map to a `[c]` vector.
    pub fn channel_mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.shape();
        if s.len() != 3 {
            return Err(Error::Dimension(format!("channel_mean needs [c, h, w], got {s:?}")));
        }
        let plane = s[1] * s[2];
        let data = t
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let value = Tensor::new(vec![s[0]], data)?;
        Ok(self.unary(value, Op::ChannelMean(a), a))
    }

    /// Adds `offset[c]` to every spatial position of channel `c` of `a`.
    pub fn add_channel(&mut self, a: Var, offset: Var) -> Result<Var> {
        let (sa, so) = (self.shape(a), self.shape(offset));
        if sa.len() != 3 || so.iter().product::<usize>() != sa[0] {
            return Err(Error::shape("add_channel", sa, so));
        }
        let plane = sa[1] * sa[2];
        let off = self.value(offset).data();
        let data = self
            .value(a)
            .data()
            .chunks(plane)
            .zip(off)
            .flat_map(|(p, &o)| p.iter().map(move |&x| x + o))
            .collect();
        let value = Tensor::new(sa.to_vec(), data)?;
        Ok(self.binary(value, Op::AddChannel(a, offset), a, offset))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() || sa.is_empty() || sa[1..] != sb[1..] {
            return Err(Error::shape("concat", sa, sb));
        }
        let mut shape = sa.to_vec();
        shape[0] += sb[0];
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let value = Tensor::new(shape, data)?;
        Ok(self.binary(value, Op::Concat(a, b), a, b))
    }

    /// Drops a `border`-pixel frame from every channel of a `[c, h, w]` map.
    pub fn crop(&mut self, a: Var, border: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || s[1] <= 2 * border || s[2] <= 2 * border {
            return Err(Error::Dimension(format!("cannot crop {border} px from {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h - 2 * border, w - 2 * border);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for y in border..h - border {
                let row = (ch * h + y) * w;
                data.extend_from_slice(&src[row + border..row + w - border]);
            }
        }
        let value = Tensor::new(vec![c, oh, ow], data)?;
        Ok(self.unary(value, Op::Crop(a, border), a))
    }

    /// Accumulates `d loss / d v` into every reachable node that requires a
    /// gradient. Leaf gradients accumulate across calls; intermediate
    /// gradients are recomputed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NotScalar(self.nodes[loss.0].value.shape().to_vec()));
        }
        for node in &mut self.nodes[..=loss.0] {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.add_grad(loss, &[1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            self.propagate(i, &op, &g);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    /// Adds the gradients of every bound parameter leaf into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (v, name) in &self.bindings {
            if let Some(g) = &self.nodes[v.0].grad {
                store.accumulate_grad(name, g);
            }
        }
    }

    fn add_grad(&mut self, v: Var, g: &[f64]) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => node.grad = Some(g.to_vec()),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, i: usize, op: &Op, g: &[f64]) {
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.wants(a) {
                    let bt = transpose_raw(self.value(b).data(), k, n);
                    let ga = matmul_raw(g, &bt, m, n, k);
                    self.add_grad(a, &ga);
                }
                if self.wants(b) {
                    let at = transpose_raw(self.value(a).data(), m, k);
                    let gb = matmul_raw(&at, g, k, m, n);
                    self.add_grad(b, &gb);
                }
            }
            Op::Transpose(a) => {
                let s = self.nodes[i].value.shape().to_vec();
                let ga = transpose_raw(g, s[0], s[1]);
                self.add_grad(a, &ga);
            }
            Op::Conv2d { input, kernel, bias } => {
                let si = self.shape(input).to_vec();
                let sk = self.shape(kernel).to_vec();
                let (c_in, h, w) = (si[0], si[1], si[2]);
                let (c_out, k) = (sk[0], sk[2]);
                if self.wants(input) || self.wants(kernel) {
                    let (gi, gk) = conv2d_backward_raw(
                        self.value(input).data(),
                        self.value(kernel).data(),
                        g,
                        c_in,
                        h,
                        w,
                        c_out,
                        k,
                    );
                    self.add_grad(input, &gi);
                    self.add_grad(kernel, &gk);
                }
                if self.wants(bias) {
                    let gb: Vec<f64> = g.chunks(h * w).map(|p| p.iter().sum()).collect();
                    self.add_grad(bias, &gb);
                }
            }
            Op::Add(a, b) => {
                self.add_grad(a, g);
                self.add_grad(b, g);
            }
            Op::Sub(a, b) => {
                self.add_grad(a, g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                self.add_grad(b, &neg);
            }
            Op::Mul(a, b) => {
                if self.wants(a) {
                    let ga = zip(g, self.value(b).data(), |g, y| g * y);
                    self.add_grad(a, &ga);
                }
                if self.wants(b) {
                    let gb = zip(g, self.value(a).data(), |g, x| g * x);
                    self.add_grad(b, &gb);
                }
            }
            Op::Div(a, b) => {
                if self.wants(a) {
                    let ga = zip(g, self.value(b).data(), |g, y| g / y);
                    self.add_grad(a, &ga);
                }
                if self.wants(b) {
                    let bv = self.value(b).data();
                    let out = self.nodes[i].value.data();
                    let gb: Vec<f64> = g
                        .iter()
                        .zip(out)
                        .zip(bv)
                        .map(|((g, q), y)| -g * q / y)
                        .collect();
                    self.add_grad(b, &gb);
                }
            }
            Op::Scale(a, s) => {
                let ga: Vec<f64> = g.iter().map(|x| x * s).collect();
                self.add_grad(a, &ga);
            }
            Op::AddScalar(a) | Op::Reshape(a) => self.add_grad(a, g),
            Op::Tanh(a) => {
                let ga = zip(g, self.nodes[i].value.data(), |g, y| g * (1.0 - y * y));
                self.add_grad(a, &ga);
            }
            Op::Abs(a) => {
                let ga = zip(g, self.value(a).data(), |g, x| {
                    if x > 0.0 {
                        g
                    } else if x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                });
                self.add_grad(a, &ga);
            }
            Op::Softmax(a) => {
                let y = self.nodes[i].value.data();
                let dot: f64 = g.iter().zip(y).map(|(g, y)| g * y).sum();
                let ga = zip(g, y, |g, y| y * (g - dot));
                self.add_grad(a, &ga);
            }
            Op::Sum(a) => {
                let ga = vec![g[0]; self.value(a).numel()];
                self.add_grad(a, &ga);
            }
            Op::Mean(a) => {
                let n = self.value(a).numel();
                let ga = vec![g[0] / n as f64; n];
                self.add_grad(a, &ga);
            }
            Op::ChannelMean(a) => {
                let s = self.shape(a);
                let plane = s[1] * s[2];
                let ga: Vec<f64> = g
                    .iter()
                    .flat_map(|&gc| std::iter::repeat_n(gc / plane as f64, plane))
                    .collect();
                self.add_grad(a, &ga);
            }
            Op::AddChannel(a, offset) => {
                self.add_grad(a, g);
                if self.wants(offset) {
                    let s = self.shape(a);
                    let plane = s[1] * s[2];
                    let go: Vec<f64> = g.chunks(plane).map(|p| p.iter().sum()).collect();
                    self.add_grad(offset, &go);
                }
            }
            Op::Concat(a, b) => {
                let na = self.value(a).numel();
                self.add_grad(a, &g[..na]);
                self.add_grad(b, &g[na..]);
            }
            Op::Crop(a, border) => {
                let s = self.shape(a).to_vec();
                let (c, h, w) = (s[0], s[1], s[2]);
                let ow = w - 2 * border;
                let mut ga = vec![0.0; c * h * w];
                let mut rows = g.chunks(ow);
                for ch in 0..c {
                    for y in border..h - border {
                        let row = (ch * h + y) * w;
                        ga[row + border..row + w - border]
                            .copy_from_slice(rows.next().expect("crop grad rows"));
                    }
                }
                self.add_grad(a, &ga);
            }
        }
    }
}

fn zip(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn softmax_tensor(t: &Tensor) -> Tensor {
    let max = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = t.data().iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Tensor::new(t.shape().to_vec(), exps.into_iter().map(|e| e / total).collect())
        .expect("softmax preserves shape")
}

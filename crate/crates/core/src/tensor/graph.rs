use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::{ParamId, ParamStore, Result, Scalar, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Input,
    Variable,
    Param(ParamId),
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    ConvT2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    LeakyRelu { x: Var, slope: T },
    MaxPool { x: Var, argmax: Vec<usize> },
    AdaptiveAvgPool { x: Var },
    Linear { x: Var, w: Var, b: Var },
    Softmax { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    MulRows { x: Var, s: Var },
    Column { x: Var, k: usize },
    Reshape { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    Mse { a: Var, b: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    GaussianRate { y: Var, mean: Var, scale: Var, floor: f64 },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Variable => "variable",
            Op::Param(_) => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvT2d { .. } => "tconv2d",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::MaxPool { .. } => "maxpool2d",
            Op::AdaptiveAvgPool { .. } => "adaptive_avg_pool2d",
            Op::Linear { .. } => "linear",
            Op::Softmax { .. } => "softmax",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::MulRows { .. } => "mul_rows",
            Op::Column { .. } => "column",
            Op::Reshape { .. } => "reshape",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Mse { .. } => "mse",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::GaussianRate { .. } => "gaussian_rate",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Reverse-mode tape. Build a fresh graph per step; node values live until
/// the graph is dropped.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    non_finite: Option<String>,
}

/// Result of [`Graph::backward`]: one gradient per parameter of the store
/// (exact zeros for frozen or unreached parameters) plus gradients of any
/// [`Graph::variable`] leaves.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    params: Vec<Tensor<T>>,
    vars: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0]
    }

    pub fn var(&self, v: Var) -> Option<&Tensor<T>> {
        self.vars.get(&v)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Adds another gradient set (same store) into this one.
    pub fn accumulate(&mut self, other: &Gradients<T>) {
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            a.add_assign(b);
        }
    }
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn rank<T: Scalar>(op: &'static str, t: &Tensor<T>, r: usize) -> Result<()> {
    if t.shape().len() != r {
        return Err(TensorError::dim(op, format!("expected rank {r}, got shape {:?}", t.shape())));
    }
    Ok(())
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Probability mass of the integer bin `[v - 0.5, v + 0.5)` under
/// `N(mean, scale^2)`, evaluated on the tail nearest to the bin so that far
/// symbols do not cancel to zero.
pub(crate) fn gaussian_bin_mass(v: f64, mean: f64, scale: f64) -> f64 {
    let d = (v - mean).abs();
    let upper = (0.5 - d) / scale;
    let lower = (-0.5 - d) / scale;
    std_normal_cdf(upper) - std_normal_cdf(lower)
}

/// Derivatives of [`gaussian_bin_mass`] with respect to (v, mean, scale).
fn gaussian_bin_mass_grad(v: f64, mean: f64, scale: f64) -> (f64, f64, f64) {
    let u = (v + 0.5 - mean) / scale;
    let l = (v - 0.5 - mean) / scale;
    let (pu, pl) = (std_normal_pdf(u), std_normal_pdf(l));
    let dv = (pu - pl) / scale;
    let ds = (-u * pu + l * pl) / scale;
    (dv, -dv, ds)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), non_finite: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some(op.name().to_string());
        }
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Fails if any forward value so far was NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        match &self.non_finite {
            Some(op) => Err(TensorError::NonFinite { op: op.clone() }),
            None => Ok(()),
        }
    }

    /// Constant leaf; never receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Leaf whose gradient is reported by [`Gradients::var`].
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Variable, true)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.tensor.clone(), Op::Param(id), p.trainable)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        rank("conv2d", xv, 4)?;
        rank("conv2d", wv, 4)?;
        let [n, c, h, wd] = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
        let [o, ci, kh, kw] = [wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]];
        if ci != c {
            return Err(TensorError::dim("conv2d", format!("input has {c} channels, weight expects {ci}")));
        }
        if kh != kw {
            return Err(TensorError::dim("conv2d", "only square kernels are supported"));
        }
        if bv.shape() != [o] {
            return Err(TensorError::dim("conv2d", format!("bias shape {:?}, expected [{o}]", bv.shape())));
        }
        let (oh, ow) = match (
            kernels::conv2d_out_dim(h, kh, stride, pad),
            kernels::conv2d_out_dim(wd, kw, stride, pad),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(TensorError::dim("conv2d", format!("kernel {kh} larger than padded input {h}x{wd}"))),
        };
        let g = ConvGeom { c, h, w: wd, k: kh, stride, pad, oh, ow };
        let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
        let mut out = vec![T::zero(); n * o * oh * ow];
        let plane = oh * ow;
        for i in 0..n {
            kernels::im2col(&xv.data()[i * c * h * wd..(i + 1) * c * h * wd], &g, &mut cols);
            let dst = &mut out[i * o * plane..(i + 1) * o * plane];
            T::gemm(o, g.col_rows(), plane, wv.data(), false, &cols, false, T::zero(), dst);
            kernels::add_channel_bias(dst, bv.data(), plane);
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let value = Tensor::new(&[n, o, oh, ow], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, stride, pad }, rg))
    }

    /// Transposed convolution with weight laid out `[in, out, k, k]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        output_padding: usize,
    ) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        rank("tconv2d", xv, 4)?;
        rank("tconv2d", wv, 4)?;
        let [n, c, h, wd] = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
        let [ci, o, kh, kw] = [wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]];
        if ci != c {
            return Err(TensorError::dim("tconv2d", format!("input has {c} channels, weight expects {ci}")));
        }
        if kh != kw {
            return Err(TensorError::dim("tconv2d", "only square kernels are supported"));
        }
        if bv.shape() != [o] {
            return Err(TensorError::dim("tconv2d", format!("bias shape {:?}, expected [{o}]", bv.shape())));
        }
        let (oh, ow) = match (
            kernels::tconv2d_out_dim(h, kh, stride, pad, output_padding),
            kernels::tconv2d_out_dim(wd, kw, stride, pad, output_padding),
        ) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => {
                return Err(TensorError::dim(
                    "tconv2d",
                    format!("inconsistent geometry: stride {stride}, padding {pad}, output_padding {output_padding}"),
                ))
            }
        };
        let g = ConvGeom { c: o, h: oh, w: ow, k: kh, stride, pad, oh: h, ow: wd };
        let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
        let mut out = vec![T::zero(); n * o * oh * ow];
        let (in_plane, out_plane) = (h * wd, oh * ow);
        for i in 0..n {
            let xs = &xv.data()[i * c * in_plane..(i + 1) * c * in_plane];
            T::gemm(g.col_rows(), c, in_plane, wv.data(), true, xs, false, T::zero(), &mut cols);
            let dst = &mut out[i * o * out_plane..(i + 1) * o * out_plane];
            kernels::col2im(&cols, &g, dst);
            kernels::add_channel_bias(dst, bv.data(), out_plane);
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let value = Tensor::new(&[n, o, oh, ow], out)?;
        Ok(self.push(value, Op::ConvT2d { x, w, b, stride, pad }, rg))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let slope = T::of(slope);
        let value = self.value(x).map(|v| if v > T::zero() { v } else { v * slope });
        let rg = self.rg(x);
        self.push(value, Op::LeakyRelu { x, slope }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    /// Non-overlapping `k x k` max pooling (stride `k`, floor mode).
    pub fn maxpool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let xv = self.value(x);
        rank("maxpool2d", xv, 4)?;
        let [n, c, h, w] = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
        if k == 0 || k > h || k > w {
            return Err(TensorError::dim("maxpool2d", format!("kernel {k} on {h}x{w} input")));
        }
        let (oh, ow) = (h / k, w / k);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        let data = xv.data();
        for nc in 0..n * c {
            let base = nc * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * k * w + ox * k;
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = base + (oy * k + dy) * w + ox * k + dx;
                            if data[idx] > data[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(x);
        let value = Tensor::new(&[n, c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }, rg))
    }

    /// Average pooling onto an exact `out_h x out_w` grid using the usual
    /// `floor(i*H/out) .. ceil((i+1)*H/out)` bins.
    pub fn adaptive_avg_pool2d(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xv = self.value(x);
        rank("adaptive_avg_pool2d", xv, 4)?;
        let [n, c, h, w] = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
        if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
            return Err(TensorError::dim(
                "adaptive_avg_pool2d",
                format!("target {out_h}x{out_w} larger than input {h}x{w}"),
            ));
        }
        let data = xv.data();
        let mut out = Vec::with_capacity(n * c * out_h * out_w);
        for nc in 0..n * c {
            let base = nc * h * w;
            for oy in 0..out_h {
                let (y0, y1) = adaptive_bin(oy, h, out_h);
                for ox in 0..out_w {
                    let (x0, x1) = adaptive_bin(ox, w, out_w);
                    let mut s = T::zero();
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            s += data[base + yy * w + xx];
                        }
                    }
                    out.push(s / T::of(((y1 - y0) * (x1 - x0)) as f64));
                }
            }
        }
        let rg = self.rg(x);
        let value = Tensor::new(&[n, c, out_h, out_w], out)?;
        Ok(self.push(value, Op::AdaptiveAvgPool { x }, rg))
    }

    /// `x [N, F] @ w[O, F]^T + b[O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        rank("linear", xv, 2)?;
        rank("linear", wv, 2)?;
        let (n, f) = (xv.shape()[0], xv.shape()[1]);
        let (o, fw) = (wv.shape()[0], wv.shape()[1]);
        if f != fw || bv.shape() != [o] {
            return Err(TensorError::dim(
                "linear",
                format!("x {:?}, w {:?}, b {:?}", xv.shape(), wv.shape(), bv.shape()),
            ));
        }
        let mut out = vec![T::zero(); n * o];
        T::gemm(n, f, o, xv.data(), false, wv.data(), true, T::zero(), &mut out);
        for row in out.chunks_mut(o) {
            for (v, &bb) in row.iter_mut().zip(bv.data()) {
                *v += bb;
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let value = Tensor::new(&[n, o], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let last = match xv.shape().last() {
            Some(&d) if d > 0 => d,
            _ => return Err(TensorError::contract("softmax", "needs a non-empty last axis")),
        };
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(last) {
            softmax_in_place(row);
        }
        let rg = self.rg(x);
        let value = Tensor::new(xv.shape(), out)?;
        Ok(self.push(value, Op::Softmax { x }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(name, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(value, Op::Scale { x, c }, rg)
    }

    /// Multiplies row `i` of `x [N, ...]` by `s[i]` where `s` has shape `[N]`.
    pub fn mul_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        let n = xv.shape().first().copied().unwrap_or(0);
        if sv.shape() != [n] || n == 0 {
            return Err(TensorError::dim("mul_rows", format!("x {:?}, s {:?}", xv.shape(), sv.shape())));
        }
        let row = xv.len() / n;
        let mut out = xv.data().to_vec();
        for (chunk, &f) in out.chunks_mut(row).zip(sv.data()) {
            for v in chunk {
                *v *= f;
            }
        }
        let rg = self.rg(x) || self.rg(s);
        let value = Tensor::new(xv.shape(), out)?;
        Ok(self.push(value, Op::MulRows { x, s }, rg))
    }

    /// Column `k` of a `[N, C]` matrix as a `[N]` vector.
    pub fn column(&mut self, x: Var, k: usize) -> Result<Var> {
        let xv = self.value(x);
        rank("column", xv, 2)?;
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        if k >= c {
            return Err(TensorError::dim("column", format!("column {k} of {c}")));
        }
        let data = (0..n).map(|i| xv.data()[i * c + k]).collect();
        let rg = self.rg(x);
        let value = Tensor::new(&[n], data)?;
        Ok(self.push(value, Op::Column { x, k }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().copied().sum::<T>() / T::of(xv.len().max(1) as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean { x }, rg)
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("mse", av, bv)?;
        let s: T = av.data().iter().zip(bv.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let value = Tensor::scalar(s / T::of(av.len().max(1) as f64));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mse { a, b }, rg))
    }

    /// Batch-mean cross-entropy between integer labels and
    /// `softmax(logits)`, evaluated in log-sum-exp form.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        rank("cross_entropy", lv, 2)?;
        let (n, c) = (lv.shape()[0], lv.shape()[1]);
        if labels.len() != n {
            return Err(TensorError::dim("cross_entropy", format!("{} labels for batch {n}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::contract("cross_entropy", format!("label {bad} outside [0, {c})")));
        }
        let mut probs = lv.data().to_vec();
        let mut total = T::zero();
        for (i, row) in probs.chunks_mut(c).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            total += lse - row[labels[i]];
            softmax_in_place(row);
        }
        let value = Tensor::scalar(total / T::of(n as f64));
        let rg = self.rg(logits);
        Ok(self.push(value, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, rg))
    }

    /// Total information content in bits of `y [N, C, H, W]` under a
    /// per-channel discretized Gaussian, with each bin mass floored at
    /// `floor` before the logarithm.
    pub fn gaussian_rate(&mut self, y: Var, mean: Var, scale: Var, floor: f64) -> Result<Var> {
        let (yv, mv, sv) = (self.value(y), self.value(mean), self.value(scale));
        rank("gaussian_rate", yv, 4)?;
        let c = yv.shape()[1];
        if mv.shape() != [c] || sv.shape() != [c] {
            return Err(TensorError::dim(
                "gaussian_rate",
                format!("y {:?}, mean {:?}, scale {:?}", yv.shape(), mv.shape(), sv.shape()),
            ));
        }
        if let Some(s) = sv.data().iter().find(|s| **s <= T::zero()) {
            return Err(TensorError::contract("gaussian_rate", format!("non-positive scale {s}")));
        }
        let plane = yv.shape()[2] * yv.shape()[3];
        let mut bits = 0.0f64;
        for (i, &v) in yv.data().iter().enumerate() {
            let ch = (i / plane) % c;
            let p = gaussian_bin_mass(v.as_f64(), mv.data()[ch].as_f64(), sv.data()[ch].as_f64());
            bits -= p.max(floor).log2();
        }
        let rg = self.rg(y) || self.rg(mean) || self.rg(scale);
        Ok(self.push(Tensor::scalar(T::of(bits)), Op::GaussianRate { y, mean, scale, floor }, rg))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var, store: &ParamStore<T>) -> Result<Gradients<T>> {
        self.check_finite()?;
        if self.value(loss).len() != 1 {
            return Err(TensorError::contract(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut params: Vec<Tensor<T>> = store.iter().map(|(_, p)| Tensor::zeros(p.tensor.shape())).collect();
        let mut vars = HashMap::new();
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        }
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if !gy.is_finite() {
                return Err(TensorError::NonFinite { op: format!("backward of {}", self.nodes[i].op.name()) });
            }
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Variable => {
                    vars.insert(Var(i), gy);
                }
                Op::Param(id) => {
                    if store.get(*id).trainable {
                        params[id.0].add_assign(&gy);
                    }
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    self.conv2d_backward(&gy, *x, *w, *b, *stride, *pad, &mut grads);
                }
                Op::ConvT2d { x, w, b, stride, pad } => {
                    self.tconv2d_backward(&gy, *x, *w, *b, *stride, *pad, &mut grads);
                }
                Op::LeakyRelu { x, slope } => {
                    let xv = self.value(*x);
                    let data = xv
                        .data()
                        .iter()
                        .zip(gy.data())
                        .map(|(&v, &g)| if v > T::zero() { g } else { g * *slope })
                        .collect();
                    self.acc(&mut grads, *x, Tensor::new(xv.shape(), data)?);
                }
                Op::MaxPool { x, argmax } => {
                    let mut gx = Tensor::zeros(self.value(*x).shape());
                    for (&idx, &g) in argmax.iter().zip(gy.data()) {
                        gx.data_mut()[idx] += g;
                    }
                    self.acc(&mut grads, *x, gx);
                }
                Op::AdaptiveAvgPool { x } => {
                    let shape = self.value(*x).shape().to_vec();
                    let (h, w) = (shape[2], shape[3]);
                    let (oh, ow) = (gy.shape()[2], gy.shape()[3]);
                    let mut gx = Tensor::zeros(&shape);
                    let gxd = gx.data_mut();
                    for (nc, gplane) in gy.data().chunks(oh * ow).enumerate() {
                        let base = nc * h * w;
                        for oy in 0..oh {
                            let (y0, y1) = adaptive_bin(oy, h, oh);
                            for ox in 0..ow {
                                let (x0, x1) = adaptive_bin(ox, w, ow);
                                let g = gplane[oy * ow + ox] / T::of(((y1 - y0) * (x1 - x0)) as f64);
                                for yy in y0..y1 {
                                    for xx in x0..x1 {
                                        gxd[base + yy * w + xx] += g;
                                    }
                                }
                            }
                        }
                    }
                    self.acc(&mut grads, *x, gx);
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (n, f) = (xv.shape()[0], xv.shape()[1]);
                    let o = wv.shape()[0];
                    if self.rg(*x) {
                        let mut gx = vec![T::zero(); n * f];
                        T::gemm(n, o, f, gy.data(), false, wv.data(), false, T::zero(), &mut gx);
                        self.acc(&mut grads, *x, Tensor::new(&[n, f], gx)?);
                    }
                    if self.rg(*w) {
                        let mut gw = vec![T::zero(); o * f];
                        T::gemm(o, n, f, gy.data(), true, xv.data(), false, T::zero(), &mut gw);
                        self.acc(&mut grads, *w, Tensor::new(&[o, f], gw)?);
                    }
                    if self.rg(*b) {
                        let mut gb = vec![T::zero(); o];
                        for row in gy.data().chunks(o) {
                            for (a, &g) in gb.iter_mut().zip(row) {
                                *a += g;
                            }
                        }
                        self.acc(&mut grads, *b, Tensor::new(&[o], gb)?);
                    }
                }
                Op::Softmax { x } => {
                    let y = &node.value;
                    let last = *y.shape().last().unwrap_or(&1);
                    let mut gx = Vec::with_capacity(y.len());
                    for (yr, gr) in y.data().chunks(last).zip(gy.data().chunks(last)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        gx.extend(yr.iter().zip(gr).map(|(&yy, &g)| yy * (g - dot)));
                    }
                    self.acc(&mut grads, *x, Tensor::new(y.shape(), gx)?);
                }
                Op::Add { a, b } => {
                    self.acc(&mut grads, *a, gy.clone());
                    self.acc(&mut grads, *b, gy);
                }
                Op::Sub { a, b } => {
                    self.acc(&mut grads, *b, gy.map(|g| -g));
                    self.acc(&mut grads, *a, gy);
                }
                Op::Mul { a, b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        let d = gy.data().iter().zip(bv.data()).map(|(&g, &y)| g * y).collect();
                        self.acc(&mut grads, *a, Tensor::new(av.shape(), d)?);
                    }
                    if self.rg(*b) {
                        let d = gy.data().iter().zip(av.data()).map(|(&g, &x)| g * x).collect();
                        self.acc(&mut grads, *b, Tensor::new(bv.shape(), d)?);
                    }
                }
                Op::Scale { x, c } => {
                    let c = *c;
                    self.acc(&mut grads, *x, gy.map(|g| g * c));
                }
                Op::MulRows { x, s } => {
                    let (xv, sv) = (self.value(*x), self.value(*s));
                    let n = sv.len();
                    let row = xv.len() / n;
                    if self.rg(*x) {
                        let mut gx = gy.data().to_vec();
                        for (chunk, &f) in gx.chunks_mut(row).zip(sv.data()) {
                            for v in chunk {
                                *v *= f;
                            }
                        }
                        self.acc(&mut grads, *x, Tensor::new(xv.shape(), gx)?);
                    }
                    if self.rg(*s) {
                        let gs = gy
                            .data()
                            .chunks(row)
                            .zip(xv.data().chunks(row))
                            .map(|(g, xx)| g.iter().zip(xx).map(|(&a, &b)| a * b).sum())
                            .collect();
                        self.acc(&mut grads, *s, Tensor::new(&[n], gs)?);
                    }
                }
                Op::Column { x, k } => {
                    let xv = self.value(*x);
                    let c = xv.shape()[1];
                    let mut gx = Tensor::zeros(xv.shape());
                    for (i, &g) in gy.data().iter().enumerate() {
                        gx.data_mut()[i * c + k] = g;
                    }
                    self.acc(&mut grads, *x, gx);
                }
                Op::Reshape { x } => {
                    let shape = self.value(*x).shape().to_vec();
                    self.acc(&mut grads, *x, gy.reshape(&shape)?);
                }
                Op::Sum { x } => {
                    let g = gy.item();
                    self.acc(&mut grads, *x, Tensor::full(self.value(*x).shape(), g));
                }
                Op::Mean { x } => {
                    let xv = self.value(*x);
                    let g = gy.item() / T::of(xv.len().max(1) as f64);
                    self.acc(&mut grads, *x, Tensor::full(xv.shape(), g));
                }
                Op::Mse { a, b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let k = T::of(2.0) * gy.item() / T::of(av.len().max(1) as f64);
                    let d: Vec<T> = av.data().iter().zip(bv.data()).map(|(&x, &y)| k * (x - y)).collect();
                    let da = Tensor::new(av.shape(), d)?;
                    if self.rg(*b) {
                        self.acc(&mut grads, *b, da.map(|v| -v));
                    }
                    self.acc(&mut grads, *a, da);
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let lv = self.value(*logits);
                    let c = lv.shape()[1];
                    let scale = gy.item() / T::of(labels.len() as f64);
                    let mut gl = probs.clone();
                    for (i, &l) in labels.iter().enumerate() {
                        gl[i * c + l] -= T::one();
                    }
                    for v in &mut gl {
                        *v *= scale;
                    }
                    self.acc(&mut grads, *logits, Tensor::new(lv.shape(), gl)?);
                }
                Op::GaussianRate { y, mean, scale, floor } => {
                    let (yv, mv, sv) = (self.value(*y), self.value(*mean), self.value(*scale));
                    let c = yv.shape()[1];
                    let plane = yv.shape()[2] * yv.shape()[3];
                    let g = gy.item().as_f64();
                    let mut gyv = vec![T::zero(); yv.len()];
                    let mut gm = vec![0.0f64; c];
                    let mut gs = vec![0.0f64; c];
                    for (i, &v) in yv.data().iter().enumerate() {
                        let ch = (i / plane) % c;
                        let (vv, mu, sd) = (v.as_f64(), mv.data()[ch].as_f64(), sv.data()[ch].as_f64());
                        let p = gaussian_bin_mass(vv, mu, sd);
                        if p <= *floor {
                            continue;
                        }
                        let dbits_dp = -1.0 / (p * std::f64::consts::LN_2);
                        let (dv, dm, ds) = gaussian_bin_mass_grad(vv, mu, sd);
                        gyv[i] = T::of(g * dbits_dp * dv);
                        gm[ch] += g * dbits_dp * dm;
                        gs[ch] += g * dbits_dp * ds;
                    }
                    if self.rg(*y) {
                        self.acc(&mut grads, *y, Tensor::new(yv.shape(), gyv)?);
                    }
                    if self.rg(*mean) {
                        self.acc(&mut grads, *mean, Tensor::new(&[c], gm.into_iter().map(T::of).collect())?);
                    }
                    if self.rg(*scale) {
                        self.acc(&mut grads, *scale, Tensor::new(&[c], gs.into_iter().map(T::of).collect())?);
                    }
                }
            }
        }
        for t in &params {
            if !t.is_finite() {
                return Err(TensorError::NonFinite { op: "backward (parameter gradient)".into() });
            }
        }
        Ok(Gradients { params, vars })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        gy: &Tensor<T>,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (xv, wv) = (self.value(x), self.value(w));
        let [n, c, h, wd] = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
        let (o, k) = (wv.shape()[0], wv.shape()[2]);
        let (oh, ow) = (gy.shape()[2], gy.shape()[3]);
        let g = ConvGeom { c, h, w: wd, k, stride, pad, oh, ow };
        let plane = oh * ow;
        let img = c * h * wd;
        let mut cols = vec![T::zero(); g.col_rows() * plane];
        let mut gw = vec![T::zero(); wv.len()];
        let mut gb = vec![T::zero(); o];
        let mut gx = vec![T::zero(); if self.rg(x) { xv.len() } else { 0 }];
        for i in 0..n {
            let gyi = &gy.data()[i * o * plane..(i + 1) * o * plane];
            if self.rg(w) {
                kernels::im2col(&xv.data()[i * img..(i + 1) * img], &g, &mut cols);
                T::gemm(o, plane, g.col_rows(), gyi, false, &cols, true, T::one(), &mut gw);
            }
            if self.rg(b) {
                kernels::accumulate_channel_sums(gyi, &mut gb, plane);
            }
            if self.rg(x) {
                T::gemm(g.col_rows(), o, plane, wv.data(), true, gyi, false, T::zero(), &mut cols);
                kernels::col2im(&cols, &g, &mut gx[i * img..(i + 1) * img]);
            }
        }
        if self.rg(x) {
            self.acc(grads, x, Tensor { shape: xv.shape().to_vec(), data: gx });
        }
        if self.rg(w) {
            self.acc(grads, w, Tensor { shape: wv.shape().to_vec(), data: gw });
        }
        if self.rg(b) {
            self.acc(grads, b, Tensor { shape: vec![o], data: gb });
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn tconv2d_backward(
        &self,
        gy: &Tensor<T>,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (xv, wv) = (self.value(x), self.value(w));
        let [n, c, h, wd] = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
        let (o, k) = (wv.shape()[1], wv.shape()[2]);
        let (oh, ow) = (gy.shape()[2], gy.shape()[3]);
        let g = ConvGeom { c: o, h: oh, w: ow, k, stride, pad, oh: h, ow: wd };
        let (in_plane, out_plane) = (h * wd, oh * ow);
        let mut cols = vec![T::zero(); g.col_rows() * in_plane];
        let mut gw = vec![T::zero(); wv.len()];
        let mut gb = vec![T::zero(); o];
        let mut gx = vec![T::zero(); if self.rg(x) { xv.len() } else { 0 }];
        for i in 0..n {
            let gyi = &gy.data()[i * o * out_plane..(i + 1) * o * out_plane];
            if self.rg(b) {
                kernels::accumulate_channel_sums(gyi, &mut gb, out_plane);
            }
            if !self.rg(x) && !self.rg(w) {
                continue;
            }
            kernels::im2col(gyi, &g, &mut cols);
            if self.rg(x) {
                let dst = &mut gx[i * c * in_plane..(i + 1) * c * in_plane];
                T::gemm(c, g.col_rows(), in_plane, wv.data(), false, &cols, false, T::zero(), dst);
            }
            if self.rg(w) {
                let xs = &xv.data()[i * c * in_plane..(i + 1) * c * in_plane];
                T::gemm(c, in_plane, g.col_rows(), xs, false, &cols, true, T::one(), &mut gw);
            }
        }
        if self.rg(x) {
            self.acc(grads, x, Tensor { shape: xv.shape().to_vec(), data: gx });
        }
        if self.rg(w) {
            self.acc(grads, w, Tensor { shape: wv.shape().to_vec(), data: gw });
        }
        if self.rg(b) {
            self.acc(grads, b, Tensor { shape: vec![o], data: gb });
        }
    }
}

fn adaptive_bin(i: usize, size: usize, out: usize) -> (usize, usize) {
    let start = i * size / out;
    let end = ((i + 1) * size).div_ceil(out);
    (start, end)
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

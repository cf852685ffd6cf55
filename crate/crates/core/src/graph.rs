//! Reverse-mode automatic differentiation over whole tensors.
//!
//! A [`Graph`] is an append-only tape. Every operation evaluates eagerly,
//! stores its output, and records enough to form vector-Jacobian products.
//! [`Graph::backward`] walks the tape once in reverse order, so gradient
//! accumulation order is fixed and results are bitwise reproducible.

use crate::error::{Error, Result};
use crate::ops::{self, ConvGeometry, Padding};
use crate::pyramid::{self, PyramidConfig};
use crate::tensor::{Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, k: Var, geo: ConvGeometry },
    ConvTranspose { x: Var, k: Var, geo: ConvGeometry },
    Dense { x: Var, w: Var },
    AddBias { x: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, Real),
    AddScalar(Var),
    LeakyRelu(Var, Real),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    SliceLast { x: Var, start: usize },
    ConcatLast(Vec<Var>),
    UpsampleNearest(Var),
    PyrDown { x: Var, cfg: PyramidConfig },
    PyrUp { x: Var, cfg: PyramidConfig },
    GradientL1(Var),
    PatchCovNorm { a: Var, b: Var, patch: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`; zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0].take().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &str) -> Result<Var> {
        value.ensure_finite(name)?;
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: Padding) -> Result<Var> {
        let geo = ops::conv2d_geometry(self.value(x), self.value(k), stride, padding)?;
        let out = ops::conv_forward_raw(self.value(x).data(), self.value(k).data(), &geo);
        let value = Tensor::from_parts(vec![geo.out_h, geo.out_w, geo.cout], out);
        let rg = self.rg(&[x, k]);
        self.push(value, Op::Conv2d { x, k, geo }, rg, "conv2d")
    }

    pub fn conv2d_transpose(
        &mut self,
        x: Var,
        k: Var,
        stride: usize,
        padding: Padding,
        output_hw: Option<(usize, usize)>,
    ) -> Result<Var> {
        let geo = ops::conv2d_transpose_geometry(self.value(x), self.value(k), stride, padding, output_hw)?;
        let out = ops::conv_input_grad_raw(self.value(x).data(), self.value(k).data(), &geo);
        let value = Tensor::from_parts(vec![geo.in_h, geo.in_w, geo.cin], out);
        let rg = self.rg(&[x, k]);
        self.push(value, Op::ConvTranspose { x, k, geo }, rg, "conv2d_transpose")
    }

    /// Affine map without bias; combine with [`Graph::add_bias`].
    pub fn dense(&mut self, x: Var, w: Var) -> Result<Var> {
        let zero = Tensor::zeros(&[self.value(w).shape().get(1).copied().unwrap_or(1)]);
        let value = ops::dense(self.value(x), self.value(w), &zero)?;
        let rg = self.rg(&[x, w]);
        self.push(value, Op::Dense { x, w }, rg, "dense")
    }

    /// Adds a vector along the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let c = *xv.shape().last().ok_or_else(|| Error::shape("add_bias on scalar"))?;
        if bv.shape() != [c] {
            return Err(Error::shape(format!("bias {:?} does not match last axis {c}", bv.shape())));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(&[x, b]);
        self.push(value, Op::AddBias { x, b }, rg, "add_bias")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Sub(a, b), rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Mul(a, b), rg, "mul")
    }

    pub fn scale(&mut self, a: Var, c: Real) -> Result<Var> {
        let value = self.value(a).scale(c);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, c), rg, "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: Real) -> Result<Var> {
        let value = self.value(a).map(|v| v + c);
        let rg = self.rg(&[a]);
        self.push(value, Op::AddScalar(a), rg, "add_scalar")
    }

    pub fn leaky_relu(&mut self, a: Var, slope: Real) -> Result<Var> {
        let value = ops::leaky_relu(self.value(a), slope);
        let rg = self.rg(&[a]);
        self.push(value, Op::LeakyRelu(a, slope), rg, "leaky_relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = ops::sigmoid(self.value(a));
        let rg = self.rg(&[a]);
        self.push(value, Op::Sigmoid(a), rg, "sigmoid")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = ops::exp(self.value(a))?;
        let rg = self.rg(&[a]);
        self.push(value, Op::Exp(a), rg, "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let value = ops::log(self.value(a))?;
        let rg = self.rg(&[a]);
        self.push(value, Op::Log(a), rg, "log")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|v| v * v);
        let rg = self.rg(&[a]);
        self.push(value, Op::Square(a), rg, "square")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum(a), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(&[a]);
        self.push(value, Op::Mean(a), rg, "mean")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        self.push(value, Op::Reshape(a), rg, "reshape")
    }

    /// Channels `[start, start + len)` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).slice_last(start, len)?;
        let rg = self.rg(&[x]);
        self.push(value, Op::SliceLast { x, start }, rg, "slice_last")
    }

    /// Concatenates along the last axis; leading extents must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let lead = &self.value(*first).shape()[..self.value(*first).shape().len() - 1];
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.value(*p).shape();
            if s.is_empty() || &s[..s.len() - 1] != lead {
                return Err(Error::shape(format!("concat: {s:?} does not match leading {lead:?}")));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(*p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let value = Tensor::from_parts(shape, data);
        let rg = self.rg(parts);
        self.push(value, Op::ConcatLast(parts.to_vec()), rg, "concat_last")
    }

    /// Nearest-neighbour resize to a larger spatial extent.
    pub fn upsample_nearest(&mut self, x: Var, target: (usize, usize)) -> Result<Var> {
        let value = pyramid::upsample_field(self.value(x), target)?;
        let rg = self.rg(&[x]);
        self.push(value, Op::UpsampleNearest(x), rg, "upsample_nearest")
    }

    /// One pyramid reduction step (blur, keep even pixels).
    pub fn pyr_down(&mut self, x: Var, cfg: &PyramidConfig) -> Result<Var> {
        let (h, w, _) = self.value(x).hwc()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!("pyr_down needs even extents, got {h}x{w}")));
        }
        let value = pyramid::down(self.value(x), cfg);
        let rg = self.rg(&[x]);
        self.push(value, Op::PyrDown { x, cfg: cfg.clone() }, rg, "pyr_down")
    }

    /// One pyramid expansion step (zero-insert, blur with gain 4).
    pub fn pyr_up(&mut self, x: Var, cfg: &PyramidConfig) -> Result<Var> {
        self.value(x).hwc()?;
        let value = pyramid::up(self.value(x), cfg);
        let rg = self.rg(&[x]);
        self.push(value, Op::PyrUp { x, cfg: cfg.clone() }, rg, "pyr_up")
    }

    /// Mean over elements of `|dx| + |dy|` with forward differences.
    pub fn gradient_l1(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(gradient_l1_value(self.value(x))?);
        let rg = self.rg(&[x]);
        self.push(value, Op::GradientL1(x), rg, "gradient_l1")
    }

    /// Mean over non-overlapping `patch x patch` tiles of the Frobenius norm
    /// of the channel cross-covariance between `a` and `b`. Trailing partial
    /// tiles are dropped.
    pub fn patch_cov_norm(&mut self, a: Var, b: Var, patch: usize) -> Result<Var> {
        self.value(a).same_shape(self.value(b), "patch_cov_norm")?;
        let value = Tensor::scalar(patch_cov_norm_value(self.value(a), self.value(b), patch)?);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::PatchCovNorm { a, b, patch }, rg, "patch_cov_norm")
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
        }
        // Only leaves keep their gradients.
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[i] = None;
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |v: Var, t: Tensor| -> Result<()> {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, k, geo } => {
                if self.needs(*x) {
                    let dx = ops::conv_input_grad_raw(g.data(), self.value(*k).data(), geo);
                    acc(*x, Tensor::from_parts(self.value(*x).shape().to_vec(), dx))?;
                }
                if self.needs(*k) {
                    let dk = ops::conv_kernel_grad_raw(self.value(*x).data(), g.data(), geo);
                    acc(*k, Tensor::from_parts(self.value(*k).shape().to_vec(), dk))?;
                }
            }
            Op::ConvTranspose { x, k, geo } => {
                if self.needs(*x) {
                    let dx = ops::conv_forward_raw(g.data(), self.value(*k).data(), geo);
                    acc(*x, Tensor::from_parts(self.value(*x).shape().to_vec(), dx))?;
                }
                if self.needs(*k) {
                    let dk = ops::conv_kernel_grad_raw(g.data(), self.value(*x).data(), geo);
                    acc(*k, Tensor::from_parts(self.value(*k).shape().to_vec(), dk))?;
                }
            }
            Op::Dense { x, w } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n_in, n_out) = (wv.shape()[0], wv.shape()[1]);
                if self.needs(*x) {
                    let mut dx = vec![0.0; n_in];
                    for (i, d) in dx.iter_mut().enumerate() {
                        let row = &wv.data()[i * n_out..(i + 1) * n_out];
                        *d = row.iter().zip(g.data()).map(|(a, b)| a * b).sum();
                    }
                    acc(*x, Tensor::from_parts(xv.shape().to_vec(), dx))?;
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; n_in * n_out];
                    for (i, row) in dw.chunks_mut(n_out).enumerate() {
                        let xi = xv.data()[i];
                        if xi != 0.0 {
                            for (d, gj) in row.iter_mut().zip(g.data()) {
                                *d = xi * gj;
                            }
                        }
                    }
                    acc(*w, Tensor::from_parts(wv.shape().to_vec(), dw))?;
                }
            }
            Op::AddBias { x, b } => {
                if self.needs(*b) {
                    let c = self.value(*b).len();
                    let mut db = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(*b, Tensor::from_parts(vec![c], db))?;
                }
                if self.needs(*x) {
                    acc(*x, g.clone())?;
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.clone())?;
                }
                if self.needs(*b) {
                    acc(*b, g.clone())?;
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.clone())?;
                }
                if self.needs(*b) {
                    acc(*b, g.scale(-1.0))?;
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.mul(self.value(*b))?)?;
                }
                if self.needs(*b) {
                    acc(*b, g.mul(self.value(*a))?)?;
                }
            }
            Op::Scale(a, c) => acc(*a, g.scale(*c))?,
            Op::AddScalar(a) => acc(*a, g.clone())?,
            Op::LeakyRelu(a, slope) => {
                let d = g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { gv * slope })?;
                acc(*a, d)?;
            }
            Op::Sigmoid(a) => {
                let d = g.zip_map(&node.value, |gv, s| gv * s * (1.0 - s))?;
                acc(*a, d)?;
            }
            Op::Exp(a) => acc(*a, g.mul(&node.value)?)?,
            Op::Log(a) => acc(*a, g.zip_map(self.value(*a), |gv, x| gv / x)?)?,
            Op::Square(a) => acc(*a, g.zip_map(self.value(*a), |gv, x| 2.0 * gv * x)?)?,
            Op::Sum(a) => {
                let gv = g.data()[0];
                acc(*a, Tensor::full(self.value(*a).shape(), gv))?;
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as Real;
                acc(*a, Tensor::full(self.value(*a).shape(), g.data()[0] / n))?;
            }
            Op::Reshape(a) => acc(*a, g.clone().reshape(self.value(*a).shape())?)?,
            Op::SliceLast { x, start } => {
                let xs = self.value(*x).shape();
                let c = xs[xs.len() - 1];
                let len = g.shape()[g.shape().len() - 1];
                let mut d = vec![0.0; self.value(*x).len()];
                for (r, row) in g.data().chunks(len).enumerate() {
                    d[r * c + start..r * c + start + len].copy_from_slice(row);
                }
                acc(*x, Tensor::from_parts(xs.to_vec(), d))?;
            }
            Op::ConcatLast(parts) => {
                let widths: Vec<usize> = parts.iter().map(|p| *self.value(*p).shape().last().unwrap()).collect();
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (p, &w) in parts.iter().zip(&widths) {
                    if self.needs(*p) {
                        let mut d = Vec::with_capacity(self.value(*p).len());
                        for row in g.data().chunks(total) {
                            d.extend_from_slice(&row[offset..offset + w]);
                        }
                        acc(*p, Tensor::from_parts(self.value(*p).shape().to_vec(), d))?;
                    }
                    offset += w;
                }
            }
            Op::UpsampleNearest(x) => {
                let s = self.value(*x).shape();
                acc(*x, pyramid::upsample_field_adjoint(g, (s[0], s[1])))?;
            }
            Op::PyrDown { x, cfg } => {
                let s = self.value(*x).shape();
                acc(*x, pyramid::down_adjoint(g, (s[0], s[1]), cfg))?;
            }
            Op::PyrUp { x, cfg } => acc(*x, pyramid::up_adjoint(g, cfg))?,
            Op::GradientL1(x) => {
                let d = gradient_l1_grad(self.value(*x)).scale(g.data()[0]);
                acc(*x, d)?;
            }
            Op::PatchCovNorm { a, b, patch } => {
                let (da, db) = patch_cov_norm_grad(self.value(*a), self.value(*b), *patch)?;
                let s = g.data()[0];
                if self.needs(*a) {
                    acc(*a, da.scale(s))?;
                }
                if self.needs(*b) {
                    acc(*b, db.scale(s))?;
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn gradient_l1_value(x: &Tensor) -> Result<Real> {
    let (h, w, c) = x.hwc()?;
    let mut total = 0.0;
    for y in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                let v = x.at(y, xx, ch);
                if xx + 1 < w {
                    total += (x.at(y, xx + 1, ch) - v).abs();
                }
                if y + 1 < h {
                    total += (x.at(y + 1, xx, ch) - v).abs();
                }
            }
        }
    }
    Ok(total / x.len() as Real)
}

fn sign(v: Real) -> Real {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn gradient_l1_grad(x: &Tensor) -> Tensor {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let n = x.len() as Real;
    let mut d = Tensor::zeros(x.shape());
    for y in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                let v = x.at(y, xx, ch);
                if xx + 1 < w {
                    let s = sign(x.at(y, xx + 1, ch) - v) / n;
                    d.set(y, xx + 1, ch, d.at(y, xx + 1, ch) + s);
                    d.set(y, xx, ch, d.at(y, xx, ch) - s);
                }
                if y + 1 < h {
                    let s = sign(x.at(y + 1, xx, ch) - v) / n;
                    d.set(y + 1, xx, ch, d.at(y + 1, xx, ch) + s);
                    d.set(y, xx, ch, d.at(y, xx, ch) - s);
                }
            }
        }
    }
    d
}

/// Centered channel cross-covariance of one tile: `cov[i][j] = mean((a_i - ā_i)(b_j - b̄_j))`.
fn tile_cov(a: &Tensor, b: &Tensor, top: usize, left: usize, p: usize) -> (Vec<Real>, Vec<Real>, Vec<Real>) {
    let c = a.shape()[2];
    let n = (p * p) as Real;
    let mut ma = vec![0.0; c];
    let mut mb = vec![0.0; c];
    for y in top..top + p {
        for x in left..left + p {
            for ch in 0..c {
                ma[ch] += a.at(y, x, ch);
                mb[ch] += b.at(y, x, ch);
            }
        }
    }
    ma.iter_mut().for_each(|v| *v /= n);
    mb.iter_mut().for_each(|v| *v /= n);
    let mut cov = vec![0.0; c * c];
    for y in top..top + p {
        for x in left..left + p {
            for i in 0..c {
                let da = a.at(y, x, i) - ma[i];
                for j in 0..c {
                    cov[i * c + j] += da * (b.at(y, x, j) - mb[j]);
                }
            }
        }
    }
    cov.iter_mut().for_each(|v| *v /= n);
    (cov, ma, mb)
}

fn tiles(h: usize, w: usize, p: usize) -> Result<Vec<(usize, usize)>> {
    if p == 0 {
        return Err(Error::config("patch size must be positive"));
    }
    let mut out = Vec::new();
    for ty in 0..h / p {
        for tx in 0..w / p {
            out.push((ty * p, tx * p));
        }
    }
    if out.is_empty() {
        return Err(Error::shape(format!("{h}x{w} holds no complete {p}x{p} patch")));
    }
    Ok(out)
}

/// Frobenius norm of a `c x c` matrix, summed so that a matrix and its
/// transpose give bit-identical results.
fn frobenius(m: &[Real], c: usize) -> Real {
    let mut s = 0.0;
    for i in 0..c {
        s += m[i * c + i] * m[i * c + i];
        for j in i + 1..c {
            s += m[i * c + j] * m[i * c + j] + m[j * c + i] * m[j * c + i];
        }
    }
    s.sqrt()
}

pub(crate) fn patch_cov_norm_value(a: &Tensor, b: &Tensor, p: usize) -> Result<Real> {
    let (h, w, _) = a.hwc()?;
    let t = tiles(h, w, p)?;
    let total: Real = t
        .iter()
        .map(|&(top, left)| {
            let (cov, _, _) = tile_cov(a, b, top, left, p);
            frobenius(&cov, a.shape()[2])
        })
        .sum();
    Ok(total / t.len() as Real)
}

fn patch_cov_norm_grad(a: &Tensor, b: &Tensor, p: usize) -> Result<(Tensor, Tensor)> {
    let (h, w, c) = a.hwc()?;
    let t = tiles(h, w, p)?;
    let mut da = Tensor::zeros(a.shape());
    let mut db = Tensor::zeros(b.shape());
    let scale = 1.0 / (t.len() * p * p) as Real;
    for &(top, left) in &t {
        let (cov, ma, mb) = tile_cov(a, b, top, left, p);
        let norm = frobenius(&cov, c);
        if norm == 0.0 {
            continue;
        }
        // d||C|| / dC = C / ||C||; centering terms cancel because deviations sum to zero.
        let unit: Vec<Real> = cov.iter().map(|v| v / norm).collect();
        for y in top..top + p {
            for x in left..left + p {
                for i in 0..c {
                    let mut ga = 0.0;
                    let mut gb = 0.0;
                    for j in 0..c {
                        ga += unit[i * c + j] * (b.at(y, x, j) - mb[j]);
                        gb += unit[j * c + i] * (a.at(y, x, j) - ma[j]);
                    }
                    da.set(y, x, i, da.at(y, x, i) + ga * scale);
                    db.set(y, x, i, db.at(y, x, i) + gb * scale);
                }
            }
        }
    }
    Ok((da, db))
}

/// Channel cross-covariance of two equally shaped images over all pixels.
pub fn patch_cov(a: &Tensor, b: &Tensor) -> Result<Vec<Vec<Real>>> {
    a.same_shape(b, "patch_cov")?;
    let (h, w, c) = a.hwc()?;
    let n = (h * w) as Real;
    let mut ma = vec![0.0; c];
    let mut mb = vec![0.0; c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                ma[ch] += a.at(y, x, ch) / n;
                mb[ch] += b.at(y, x, ch) / n;
            }
        }
    }
    let mut cov = vec![vec![0.0; c]; c];
    for y in 0..h {
        for x in 0..w {
            for i in 0..c {
                for j in 0..c {
                    cov[i][j] += (a.at(y, x, i) - ma[i]) * (b.at(y, x, j) - mb[j]) / n;
                }
            }
        }
    }
    Ok(cov)
}

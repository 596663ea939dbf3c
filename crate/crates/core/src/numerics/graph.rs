//! Reverse-mode tape over whole arrays.
//!
//! A [`Graph`] records every operation applied during one forward pass. Nodes
//! are created in topological order, so the backward pass is a single reverse
//! sweep. Parameters enter the graph through [`Graph::param`], which reuses one
//! leaf per parameter however often it is read (e.g. across BPTT steps).

use alloc::vec;
use alloc::vec::Vec;

use super::kernels;
use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv3 {
        x: Var,
        k: Var,
        b: Option<Var>,
        cols: Vec<T>,
    },
    MaxPool2 {
        x: Var,
        arg: Vec<usize>,
    },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Abs(Var),
    Square(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Shift(Var),
    ScaleRows(Var, Vec<T>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    LogSoftmax(Var),
    Softmax(Var),
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    Minimum(Var, Var),
    Maximum(Var, Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// One forward pass worth of recorded operations.
pub struct Graph<'p, T: Real> {
    params: Option<&'p ParamStore<T>>,
    param_vars: Vec<Option<Var>>,
    track_params: bool,
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<Option<Var>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a parameter; `None` if it did not reach the loss.
    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params
            .get(id.0)
            .copied()
            .flatten()
            .and_then(|v| self.get(v))
    }

    /// Adds every parameter gradient into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (id, arr) in store.iter_mut() {
            if let Some(g) = self.param(id) {
                arr.accumulate_grad(g);
            }
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor<impl Real>, b: &Tensor<impl Real>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

impl<'p, T: Real> Graph<'p, T> {
    /// A graph whose parameter leaves require gradients.
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self::build(Some(params), true)
    }

    /// A graph that reads parameters but records no gradient dependencies.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Self::build(Some(params), false)
    }

    /// A graph without parameters (constants only).
    pub fn detached() -> Self {
        Self::build(None, false)
    }

    fn build(params: Option<&'p ParamStore<T>>, track_params: bool) -> Self {
        Self {
            params,
            param_vars: vec![None; params.map_or(0, |p| p.len())],
            track_params,
            nodes: Vec::new(),
        }
    }

    pub fn tracks_params(&self) -> bool {
        self.track_params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).map(f);
        let tracked = self.tracked(&[x]);
        self.push(value, op, tracked)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let store = self.params.expect("graph built without a parameter store");
        let value = store.tensor(id);
        let v = self.push(value, Op::Param, self.track_params);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// `x Wᵀ + b` for `x: [B, n]`, `W: [m, n]`, `b: [m]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::dim("linear", xs, ws));
        }
        let (batch, n, m) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [m] {
                return Err(Error::dim("linear bias", ws, self.shape(b)));
            }
        }
        let wt = kernels::transpose(self.value(w).data(), m, n);
        let mut out = vec![T::zero(); batch * m];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(m) {
                row.copy_from_slice(bias);
            }
        }
        kernels::matmul_acc(self.value(x).data(), &wt, &mut out, batch, n, m);
        let mut deps = vec![x, w];
        deps.extend(b);
        let tracked = self.tracked(&deps);
        Ok(self.push(Tensor::new(&[batch, m], out)?, Op::Linear { x, w, b }, tracked))
    }

    /// 3×3 cross-correlation with zero padding 1 and stride 1.
    /// `x: [B, C, H, W]`, `k: [O, C, 3, 3]`, `b: [O]` → `[B, O, H, W]`.
    pub fn conv3(&mut self, x: Var, k: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if xs.len() != 4 || ks.len() != 4 || ks[1] != xs[1] || ks[2] != 3 || ks[3] != 3 {
            return Err(Error::dim("conv3", &xs, &ks));
        }
        let (batch, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let o = ks[0];
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::dim("conv3 bias", &ks, self.shape(b)));
            }
        }
        let hw = h * w;
        let cols = kernels::im2col3(self.value(x).data(), batch, c, h, w);
        let mut out_t = vec![T::zero(); o * batch * hw];
        kernels::matmul_acc(self.value(k).data(), &cols, &mut out_t, o, c * 9, batch * hw);
        let mut out = vec![T::zero(); batch * o * hw];
        let bias = b.map(|b| self.value(b).data().to_vec());
        for oi in 0..o {
            let bv = bias.as_ref().map_or(T::zero(), |bb| bb[oi]);
            for bi in 0..batch {
                let src = &out_t[oi * batch * hw + bi * hw..oi * batch * hw + (bi + 1) * hw];
                let dst = &mut out[(bi * o + oi) * hw..(bi * o + oi + 1) * hw];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bv;
                }
            }
        }
        let keep_cols = self.nodes[k.0].tracked;
        let mut deps = vec![x, k];
        deps.extend(b);
        let tracked = self.tracked(&deps);
        let op = Op::Conv3 {
            x,
            k,
            b,
            cols: if keep_cols { cols } else { Vec::new() },
        };
        Ok(self.push(Tensor::new(&[batch, o, h, w], out)?, op, tracked))
    }

    /// 2×2 max pooling, stride 2, output `[B, C, ⌈H/2⌉, ⌈W/2⌉]`.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::dim("maxpool2", &xs, &[0, 0, 0, 0]));
        }
        let (out, arg) = kernels::maxpool2(self.value(x).data(), xs[0] * xs[1], xs[2], xs[3]);
        let shape = [xs[0], xs[1], xs[2].div_ceil(2), xs[3].div_ceil(2)];
        let tracked = self.tracked(&[x]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MaxPool2 { x, arg }, tracked))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, T::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, T::exp, Op::Exp(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, T::abs, Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    /// `x + s` elementwise.
    pub fn shift(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v + s, Op::Shift(x))
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(x, |v| v.max(lo).min(hi), Op::Clamp { x, lo, hi })
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        same_shape(name, self.value(a), self.value(b))?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape(), data)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, op, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise minimum; ties take `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("minimum", a, b, |x, y| if x <= y { x } else { y }, Op::Minimum(a, b))
    }

    /// Elementwise maximum; ties take `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("maximum", a, b, |x, y| if x >= y { x } else { y }, Op::Maximum(a, b))
    }

    /// Multiplies row `i` of `x` by `factors[i]`.
    pub fn scale_rows(&mut self, x: Var, factors: &[T]) -> Result<Var> {
        let xv = self.value(x);
        if factors.len() != xv.rows() || xv.shape().is_empty() {
            return Err(Error::dim("scale_rows", xv.shape(), &[factors.len()]));
        }
        let n = xv.row_len();
        let mut data = xv.data().to_vec();
        for (row, &f) in data.chunks_mut(n.max(1)).zip(factors) {
            row.iter_mut().for_each(|v| *v *= f);
        }
        let value = Tensor::new(xv.shape(), data)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::ScaleRows(x, factors.to_vec()), tracked))
    }

    /// Concatenates `[B, nᵢ]` matrices along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Config("concat_cols of nothing".into()))?;
        let rows = self.value(first).rows();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::dim("concat_cols", self.shape(first), s));
            }
            total += s[1];
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let tracked = self.tracked(parts);
        Ok(self.push(
            Tensor::new(&[rows, total], data)?,
            Op::ConcatCols(parts.to_vec()),
            tracked,
        ))
    }

    /// Columns `start..start + len` of a `[B, n]` matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start + len > s[1] {
            return Err(Error::dim("slice_cols", &s, &[start, len]));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(s[0] * len);
        for r in 0..s[0] {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let tracked = self.tracked(&[x]);
        Ok(self.push(Tensor::new(&[s[0], len], data)?, Op::SliceCols { x, start }, tracked))
    }

    /// Stacks along the leading dimension.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_rows(&tensors)?;
        let tracked = self.tracked(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), tracked))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).slice_rows(start, len)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::SliceRows { x, start }, tracked))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::Reshape(x), tracked))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let tracked = self.tracked(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), tracked)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s: T = xv.data().iter().copied().sum();
        let m = s / T::of(xv.len().max(1) as f64);
        let tracked = self.tracked(&[x]);
        self.push(Tensor::scalar(m), Op::Mean(x), tracked)
    }

    /// Row sums of a `[B, n]` matrix, giving `[B]`.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::dim("sum_cols", &s, &[0, 0]));
        }
        let xv = self.value(x);
        let data = (0..s[0]).map(|r| xv.row(r).iter().copied().sum()).collect();
        let tracked = self.tracked(&[x]);
        Ok(self.push(Tensor::new(&[s[0]], data)?, Op::SumCols(x), tracked))
    }

    /// Row-wise `x - logsumexp(x)` for `[B, A]`.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::dim("log_softmax", &s, &[0, 0]));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(xv.len());
        for r in 0..s[0] {
            let row = xv.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            data.extend(row.iter().map(|&v| v - lse));
        }
        let tracked = self.tracked(&[x]);
        Ok(self.push(Tensor::new(&s, data)?, Op::LogSoftmax(x), tracked))
    }

    /// Row-wise softmax for `[B, A]`.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::dim("softmax", &s, &[0, 0]));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(xv.len());
        for r in 0..s[0] {
            let row = xv.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = data.len();
            data.extend(row.iter().map(|&v| (v - max).exp()));
            let total: T = data[start..].iter().copied().sum();
            data[start..].iter_mut().for_each(|v| *v = *v / total);
        }
        let tracked = self.tracked(&[x]);
        Ok(self.push(Tensor::new(&s, data)?, Op::Softmax(x), tracked))
    }

    /// Picks `x[b, idx[b]]` from a `[B, A]` matrix.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || idx.len() != s[0] || idx.iter().any(|&i| i >= s[1]) {
            return Err(Error::dim("gather", &s, &[idx.len()]));
        }
        let xv = self.value(x);
        let data = idx.iter().enumerate().map(|(r, &i)| xv.row(r)[i]).collect();
        let tracked = self.tracked(&[x]);
        Ok(self.push(
            Tensor::new(&[s[0]], data)?,
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
            tracked,
        ))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim("backward", self.shape(loss), &[]));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backward_node(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(Gradients {
            grads,
            params: self.param_vars.clone(),
        })
    }

    fn backward_node(&self, node: &Node<T>, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let y = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].tracked {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let g = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
            f(g);
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (batch, n) = (xv.shape()[0], xv.shape()[1]);
                let m = wv.shape()[0];
                acc(*x, &mut |g| kernels::matmul_acc(dy, wv.data(), g, batch, m, n));
                acc(*w, &mut |g| {
                    let dyt = kernels::transpose(dy, batch, m);
                    kernels::matmul_acc(&dyt, xv.data(), g, m, batch, n);
                });
                if let Some(b) = b {
                    acc(*b, &mut |g| {
                        for row in dy.chunks(m) {
                            for (gi, &d) in g.iter_mut().zip(row) {
                                *gi += d;
                            }
                        }
                    });
                }
            }
            Op::Conv3 { x, k, b, cols } => {
                let xs = self.shape(*x);
                let (batch, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let o = self.shape(*k)[0];
                let hw = h * w;
                let mut dy_t = vec![T::zero(); o * batch * hw];
                for bi in 0..batch {
                    for oi in 0..o {
                        let src = &dy[(bi * o + oi) * hw..(bi * o + oi + 1) * hw];
                        dy_t[oi * batch * hw + bi * hw..oi * batch * hw + (bi + 1) * hw]
                            .copy_from_slice(src);
                    }
                }
                acc(*k, &mut |g| {
                    let col = kernels::transpose(cols, c * 9, batch * hw);
                    kernels::matmul_acc(&dy_t, &col, g, o, batch * hw, c * 9);
                });
                acc(*x, &mut |g| {
                    let kt = kernels::transpose(self.value(*k).data(), o, c * 9);
                    let mut dcols = vec![T::zero(); c * 9 * batch * hw];
                    kernels::matmul_acc(&kt, &dy_t, &mut dcols, c * 9, o, batch * hw);
                    kernels::col2im3(&dcols, g, batch, c, h, w);
                });
                if let Some(b) = b {
                    acc(*b, &mut |g| {
                        for (oi, gi) in g.iter_mut().enumerate() {
                            *gi += dy_t[oi * batch * hw..(oi + 1) * batch * hw]
                                .iter()
                                .copied()
                                .sum::<T>();
                        }
                    });
                }
            }
            Op::MaxPool2 { x, arg } => acc(*x, &mut |g| {
                for (&a, &d) in arg.iter().zip(dy) {
                    g[a] += d;
                }
            }),
            Op::Relu(x) => acc(*x, &mut |g| {
                for ((gi, &d), &yv) in g.iter_mut().zip(dy).zip(y) {
                    if yv > T::zero() {
                        *gi += d;
                    }
                }
            }),
            Op::Tanh(x) => acc(*x, &mut |g| {
                for ((gi, &d), &yv) in g.iter_mut().zip(dy).zip(y) {
                    *gi += d * (T::one() - yv * yv);
                }
            }),
            Op::Sigmoid(x) => acc(*x, &mut |g| {
                for ((gi, &d), &yv) in g.iter_mut().zip(dy).zip(y) {
                    *gi += d * yv * (T::one() - yv);
                }
            }),
            Op::Exp(x) => acc(*x, &mut |g| {
                for ((gi, &d), &yv) in g.iter_mut().zip(dy).zip(y) {
                    *gi += d * yv;
                }
            }),
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                acc(*x, &mut |g| {
                    for ((gi, &d), &v) in g.iter_mut().zip(dy).zip(xv) {
                        if v > T::zero() {
                            *gi += d;
                        } else if v < T::zero() {
                            *gi -= d;
                        }
                    }
                })
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                acc(*x, &mut |g| {
                    for ((gi, &d), &v) in g.iter_mut().zip(dy).zip(xv) {
                        *gi += d * (v + v);
                    }
                })
            }
            Op::Add(a, b) => {
                acc(*a, &mut |g| add_into(g, dy));
                acc(*b, &mut |g| add_into(g, dy));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| add_into(g, dy));
                acc(*b, &mut |g| {
                    for (gi, &d) in g.iter_mut().zip(dy) {
                        *gi -= d;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |g| {
                    for ((gi, &d), &o) in g.iter_mut().zip(dy).zip(bv) {
                        *gi += d * o;
                    }
                });
                acc(*b, &mut |g| {
                    for ((gi, &d), &o) in g.iter_mut().zip(dy).zip(av) {
                        *gi += d * o;
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |g| {
                for (gi, &d) in g.iter_mut().zip(dy) {
                    *gi += d * *s;
                }
            }),
            Op::Shift(x) | Op::Reshape(x) => acc(*x, &mut |g| add_into(g, dy)),
            Op::ScaleRows(x, factors) => {
                let n = self.value(*x).row_len().max(1);
                acc(*x, &mut |g| {
                    for ((grow, drow), &f) in g.chunks_mut(n).zip(dy.chunks(n)).zip(factors) {
                        for (gi, &d) in grow.iter_mut().zip(drow) {
                            *gi += d * f;
                        }
                    }
                })
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let n = self.shape(p)[1];
                    acc(p, &mut |g| {
                        for (grow, drow) in g.chunks_mut(n).zip(dy.chunks(total)) {
                            add_into(grow, &drow[offset..offset + n]);
                        }
                    });
                    offset += n;
                }
            }
            Op::SliceCols { x, start } => {
                let total = self.shape(*x)[1];
                let n = node.value.shape()[1];
                acc(*x, &mut |g| {
                    for (grow, drow) in g.chunks_mut(total).zip(dy.chunks(n)) {
                        add_into(&mut grow[*start..*start + n], drow);
                    }
                })
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    acc(p, &mut |g| add_into(g, &dy[offset..offset + n]));
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                let n = self.value(*x).row_len();
                acc(*x, &mut |g| {
                    add_into(&mut g[start * n..start * n + dy.len()], dy);
                })
            }
            Op::Sum(x) => acc(*x, &mut |g| g.iter_mut().for_each(|gi| *gi += dy[0])),
            Op::Mean(x) => {
                let scale = dy[0] / T::of(self.value(*x).len().max(1) as f64);
                acc(*x, &mut |g| g.iter_mut().for_each(|gi| *gi += scale))
            }
            Op::SumCols(x) => {
                let n = self.shape(*x)[1];
                acc(*x, &mut |g| {
                    for (grow, &d) in g.chunks_mut(n).zip(dy) {
                        grow.iter_mut().for_each(|gi| *gi += d);
                    }
                })
            }
            Op::LogSoftmax(x) => {
                let n = self.shape(*x)[1];
                acc(*x, &mut |g| {
                    for ((grow, drow), yrow) in g.chunks_mut(n).zip(dy.chunks(n)).zip(y.chunks(n)) {
                        let total: T = drow.iter().copied().sum();
                        for ((gi, &d), &yv) in grow.iter_mut().zip(drow).zip(yrow) {
                            *gi += d - yv.exp() * total;
                        }
                    }
                })
            }
            Op::Softmax(x) => {
                let n = self.shape(*x)[1];
                acc(*x, &mut |g| {
                    for ((grow, drow), yrow) in g.chunks_mut(n).zip(dy.chunks(n)).zip(y.chunks(n)) {
                        let dot: T = drow.iter().zip(yrow).map(|(&d, &yv)| d * yv).sum();
                        for ((gi, &d), &yv) in grow.iter_mut().zip(drow).zip(yrow) {
                            *gi += yv * (d - dot);
                        }
                    }
                })
            }
            Op::Gather { x, idx } => {
                let n = self.shape(*x)[1];
                acc(*x, &mut |g| {
                    for (r, (&i, &d)) in idx.iter().zip(dy).enumerate() {
                        g[r * n + i] += d;
                    }
                })
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                acc(*x, &mut |g| {
                    for ((gi, &d), &v) in g.iter_mut().zip(dy).zip(xv) {
                        if v >= *lo && v <= *hi {
                            *gi += d;
                        }
                    }
                })
            }
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let is_min = matches!(node.op, Op::Minimum(..));
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let pick_a = |x: T, z: T| if is_min { x <= z } else { x >= z };
                acc(*a, &mut |g| {
                    for (((gi, &d), &x), &z) in g.iter_mut().zip(dy).zip(av).zip(bv) {
                        if pick_a(x, z) {
                            *gi += d;
                        }
                    }
                });
                acc(*b, &mut |g| {
                    for (((gi, &d), &x), &z) in g.iter_mut().zip(dy).zip(av).zip(bv) {
                        if !pick_a(x, z) {
                            *gi += d;
                        }
                    }
                });
            }
        }
    }
}

fn add_into<T: Real>(g: &mut [T], d: &[T]) {
    for (gi, &di) in g.iter_mut().zip(d) {
        *gi += di;
    }
}

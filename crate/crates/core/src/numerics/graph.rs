//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as a node in creation order; a
//! [`Var`] is an index into it. [`Graph::backward`] walks the nodes in
//! reverse and accumulates adjoints. Binary elementwise operations
//! broadcast with right-aligned shapes.

use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::tensor::{numel, Real, Tensor};
use crate::error::{Error, Result};

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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Relu(Var),
    Silu(Var),
    Square(Var),
    SumAll(Var),
    SumRows(Var),
    Reshape(Var),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        pad: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    AvgPool(Var, usize),
    Upsample(Var, usize),
}

struct Node<R: Real> {
    value: Rc<Tensor<R>>,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
pub struct Graph<R: Real = f32> {
    nodes: RefCell<Vec<Node<R>>>,
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n {
            a[i + a.len() - n]
        } else {
            1
        };
        let db = if i + b.len() >= n {
            b[i + b.len() - n]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flat index of `out`, the flat index of the broadcast source.
fn broadcast_offsets(out: &[usize], inp: &[usize]) -> Vec<usize> {
    let n = out.len();
    let mut strides = vec![0usize; n];
    let mut acc = 1;
    for i in (0..inp.len()).rev() {
        let d = i + n - inp.len();
        strides[d] = if inp[i] == 1 { 0 } else { acc };
        acc *= inp[i];
    }
    let total = numel(out);
    let mut offsets = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    let mut off = 0usize;
    for _ in 0..total {
        offsets.push(off);
        for d in (0..n).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    offsets
}

/// Sums `grad` (shaped like the broadcast output) back onto `shape`.
fn reduce_to<R: Real>(grad: Vec<R>, out_shape: &[usize], shape: &[usize]) -> Tensor<R> {
    if out_shape == shape {
        return Tensor::from_parts(shape.to_vec(), grad);
    }
    let offs = broadcast_offsets(out_shape, shape);
    let mut acc = vec![R::zero(); numel(shape)];
    for (g, &o) in grad.iter().zip(&offs) {
        acc[o] = acc[o] + *g;
    }
    Tensor::from_parts(shape.to_vec(), acc)
}

/// Splits a shape around `axis` into (outer, axis length, inner).
fn around_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn silu_grad<R: Real>(x: R) -> R {
    let s = R::one() / (R::one() + (-x).exp());
    s * (R::one() + x * (R::one() - s))
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<R>, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Leaf node; tracks gradients iff `t.requires_grad`.
    pub fn leaf(&self, t: Tensor<R>) -> Var {
        let rg = t.requires_grad;
        self.push(t, Op::Leaf, rg)
    }

    pub fn param(&self, t: Tensor<R>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&self, t: Tensor<R>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&self, v: f64) -> Var {
        self.constant(Tensor::scalar(R::of(v)))
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<R>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn binary(&self, a: Var, b: Var, name: &str, f: impl Fn(R, R) -> R, op: Op) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = if va.shape() == vb.shape() {
            va.data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| f(x, y))
                .collect()
        } else {
            let out = broadcast_shape(va.shape(), vb.shape())
                .ok_or_else(|| Error::shape(name, va.shape(), vb.shape()))?;
            let oa = broadcast_offsets(&out, va.shape());
            let ob = broadcast_offsets(&out, vb.shape());
            let data = oa
                .iter()
                .zip(&ob)
                .map(|(&i, &j)| f(va.data()[i], vb.data()[j]))
                .collect();
            return Ok(self.push(Tensor::from_parts(out, data), op, self.rg(a) || self.rg(b)));
        };
        Ok(self.push(
            Tensor::from_parts(va.shape().to_vec(), data),
            op,
            self.rg(a) || self.rg(b),
        ))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&self, a: Var, f: impl Fn(R) -> R, op: Op) -> Var {
        let v = self.value(a);
        self.push(v.map(f), op, self.rg(a))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let sr = R::of(s);
        self.unary(a, move |x| x * sr, Op::Scale(a, s))
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Var {
        let sr = R::of(s);
        self.unary(a, move |x| x + sr, Op::AddScalar(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), Op::Log(a))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| x.max(R::zero()), Op::Relu(a))
    }

    pub fn silu(&self, a: Var) -> Var {
        self.unary(a, |x| x / (R::one() + (-x).exp()), Op::Silu(a))
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// `c * tanh(a / c)`: a smooth clamp to (-c, c).
    pub fn soft_clamp(&self, a: Var, c: f64) -> Var {
        let t = self.tanh(self.scale(a, 1.0 / c));
        self.scale(t, c)
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().copied().sum::<R>();
        self.push(Tensor::scalar(s), Op::SumAll(a), self.rg(a))
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sums every axis except the leading one: `[N, ...] -> [N]`.
    pub fn sum_rows(&self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.ndim() == 0 {
            return Err(Error::Contract("sum_rows of a scalar".into()));
        }
        let n = v.batch_len();
        let stride = numel(v.item_shape());
        let data = (0..n)
            .map(|i| {
                v.data()[i * stride..(i + 1) * stride]
                    .iter()
                    .copied()
                    .sum::<R>()
            })
            .collect();
        Ok(self.push(
            Tensor::from_parts(vec![n], data),
            Op::SumRows(a),
            self.rg(a),
        ))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a);
        let t = v.reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(a), self.rg(a)))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ndim() != 2 || vb.ndim() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::shape("matmul", va.shape(), vb.shape()));
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut out = vec![R::zero(); m * n];
        R::gemm(
            m,
            k,
            n,
            R::one(),
            va.data(),
            false,
            vb.data(),
            false,
            R::zero(),
            &mut out,
        );
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul(a, b),
            self.rg(a) || self.rg(b),
        ))
    }

    fn conv_geom(&self, x: &Tensor<R>, w: &Tensor<R>, pad: usize) -> Result<ConvGeom> {
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
            return Err(Error::shape("conv2d", ws, xs));
        }
        let k = ws[2];
        if xs[2] + 2 * pad < k || xs[3] + 2 * pad < k {
            return Err(Error::shape("conv2d", ws, xs));
        }
        Ok(ConvGeom {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            o: ws[0],
            k,
            pad,
        })
    }

    /// Stride-1 2D convolution with zero padding. `x: [N, C, H, W]`,
    /// `w: [O, C, K, K]`, `b: [O]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let g = self.conv_geom(&vx, &vw, pad)?;
        let vb = b.map(|b| self.value(b));
        if let Some(vb) = &vb {
            if vb.shape() != [g.o] {
                return Err(Error::shape("conv2d bias", &[g.o], vb.shape()));
            }
        }
        let out = kernels::conv2d_forward(&g, vx.data(), vw.data(), vb.as_ref().map(|t| t.data()));
        let (oh, ow) = g.out_hw();
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::from_parts(vec![g.n, g.o, oh, ow], out),
            Op::Conv2d { x, w, b, pad },
            rg,
        ))
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let first = values
            .first()
            .ok_or_else(|| Error::Contract("concat of zero inputs".into()))?;
        if axis >= first.ndim() {
            return Err(Error::Contract(format!("concat axis {axis} out of range")));
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        for v in &values {
            let mut s = v.shape().to_vec();
            if s.len() != shape.len() {
                return Err(Error::shape("concat", first.shape(), v.shape()));
            }
            shape[axis] += s[axis];
            s[axis] = 0;
            let mut expect = first.shape().to_vec();
            expect[axis] = 0;
            if s != expect {
                return Err(Error::shape("concat", first.shape(), v.shape()));
            }
        }
        let (outer, _, inner) = around_axis(&shape, axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for v in &values {
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Entries `start..start + len` along `axis`.
    pub fn slice(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a);
        if axis >= v.ndim() || start + len > v.shape()[axis] {
            return Err(Error::Contract(format!(
                "slice {start}..{} of axis {axis} in {:?}",
                start + len,
                v.shape()
            )));
        }
        let (outer, n, inner) = around_axis(v.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Slice { x: a, axis, start },
            self.rg(a),
        ))
    }

    fn planes(&self, v: &Tensor<R>, k: usize, down: bool) -> Result<(usize, usize, usize)> {
        let s = v.shape();
        if s.len() < 2 || k == 0 {
            return Err(Error::Contract(format!(
                "pooling needs [.., H, W], got {s:?}"
            )));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        if down && (h % k != 0 || w % k != 0) {
            return Err(Error::shape("avg_pool2d", &[k, k], &[h, w]));
        }
        Ok((numel(&s[..s.len() - 2]), h, w))
    }

    pub fn avg_pool2d(&self, a: Var, k: usize) -> Result<Var> {
        let v = self.value(a);
        let (p, h, w) = self.planes(&v, k, true)?;
        let data = kernels::avg_pool(v.data(), p, h, w, k);
        let mut shape = v.shape().to_vec();
        let nd = shape.len();
        shape[nd - 2] = h / k;
        shape[nd - 1] = w / k;
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::AvgPool(a, k),
            self.rg(a),
        ))
    }

    pub fn upsample_nearest2d(&self, a: Var, k: usize) -> Result<Var> {
        let v = self.value(a);
        let (p, h, w) = self.planes(&v, k, false)?;
        let data = kernels::upsample_nearest(v.data(), p, h, w, k);
        let mut shape = v.shape().to_vec();
        let nd = shape.len();
        shape[nd - 2] = h * k;
        shape[nd - 1] = w * k;
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Upsample(a, k),
            self.rg(a),
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<R>> {
        let nodes = self.nodes.borrow();
        let lv = &nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.data()[0].is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Tensor<R>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::from_parts(lv.shape().to_vec(), vec![R::one()]));

        let accumulate = |grads: &mut Vec<Option<Tensor<R>>>, v: Var, g: Tensor<R>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                        *e = *e + *x;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        };

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let out = &node.value;
            let val = |v: Var| &nodes[v.0].value;
            let rg = |v: Var| nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let neg = matches!(node.op, Op::Sub(..));
                    if rg(*a) {
                        let t = reduce_to(g.data().to_vec(), out.shape(), val(*a).shape());
                        accumulate(&mut grads, *a, t);
                    }
                    if rg(*b) {
                        let d: Vec<R> = if neg {
                            g.data().iter().map(|&x| -x).collect()
                        } else {
                            g.data().to_vec()
                        };
                        let t = reduce_to(d, out.shape(), val(*b).shape());
                        accumulate(&mut grads, *b, t);
                    }
                }
                Op::Mul(a, b) | Op::Div(a, b) => {
                    let is_div = matches!(node.op, Op::Div(..));
                    let (va, vb) = (val(*a), val(*b));
                    let oa = broadcast_offsets(out.shape(), va.shape());
                    let ob = broadcast_offsets(out.shape(), vb.shape());
                    if rg(*a) {
                        let d: Vec<R> = g
                            .data()
                            .iter()
                            .zip(&ob)
                            .map(|(&gi, &j)| {
                                if is_div {
                                    gi / vb.data()[j]
                                } else {
                                    gi * vb.data()[j]
                                }
                            })
                            .collect();
                        accumulate(&mut grads, *a, reduce_to(d, out.shape(), va.shape()));
                    }
                    if rg(*b) {
                        let d: Vec<R> = g
                            .data()
                            .iter()
                            .zip(oa.iter().zip(&ob))
                            .map(|(&gi, (&ia, &jb))| {
                                if is_div {
                                    let bv = vb.data()[jb];
                                    -gi * va.data()[ia] / (bv * bv)
                                } else {
                                    gi * va.data()[ia]
                                }
                            })
                            .collect();
                        accumulate(&mut grads, *b, reduce_to(d, out.shape(), vb.shape()));
                    }
                }
                Op::Neg(a) => accumulate(&mut grads, *a, g.map(|x| -x)),
                Op::Scale(a, s) => {
                    let s = R::of(*s);
                    accumulate(&mut grads, *a, g.map(|x| x * s))
                }
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::Exp(a) => {
                    let d = g.zip_map(out, |gi, y| gi * y)?;
                    accumulate(&mut grads, *a, d)
                }
                Op::Log(a) => {
                    let d = g.zip_map(val(*a), |gi, x| gi / x)?;
                    accumulate(&mut grads, *a, d)
                }
                Op::Tanh(a) => {
                    let d = g.zip_map(out, |gi, y| gi * (R::one() - y * y))?;
                    accumulate(&mut grads, *a, d)
                }
                Op::Relu(a) => {
                    let d =
                        g.zip_map(val(*a), |gi, x| if x > R::zero() { gi } else { R::zero() })?;
                    accumulate(&mut grads, *a, d)
                }
                Op::Silu(a) => {
                    let d = g.zip_map(val(*a), |gi, x| gi * silu_grad(x))?;
                    accumulate(&mut grads, *a, d)
                }
                Op::Square(a) => {
                    let two = R::of(2.0);
                    let d = g.zip_map(val(*a), |gi, x| two * gi * x)?;
                    accumulate(&mut grads, *a, d)
                }
                Op::SumAll(a) => {
                    let gv = g.data()[0];
                    accumulate(&mut grads, *a, Tensor::full(val(*a).shape().to_vec(), gv))
                }
                Op::SumRows(a) => {
                    let va = val(*a);
                    let stride = numel(va.item_shape());
                    let d = Tensor::from_fn(va.shape().to_vec(), |k| g.data()[k / stride]);
                    accumulate(&mut grads, *a, d)
                }
                Op::Reshape(a) => {
                    let d = g.into_shape(val(*a).shape().to_vec())?;
                    accumulate(&mut grads, *a, d)
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                    if rg(*a) {
                        let mut d = vec![R::zero(); m * k];
                        R::gemm(
                            m,
                            n,
                            k,
                            R::one(),
                            g.data(),
                            false,
                            vb.data(),
                            true,
                            R::zero(),
                            &mut d,
                        );
                        accumulate(&mut grads, *a, Tensor::from_parts(vec![m, k], d));
                    }
                    if rg(*b) {
                        let mut d = vec![R::zero(); k * n];
                        R::gemm(
                            k,
                            m,
                            n,
                            R::one(),
                            va.data(),
                            true,
                            g.data(),
                            false,
                            R::zero(),
                            &mut d,
                        );
                        accumulate(&mut grads, *b, Tensor::from_parts(vec![k, n], d));
                    }
                }
                Op::Conv2d { x, w, b, pad } => {
                    let (vx, vw) = (val(*x), val(*w));
                    let geom = self.conv_geom(vx, vw, *pad)?;
                    let want = (rg(*x), rg(*w), b.is_some_and(&rg));
                    let cg = kernels::conv2d_backward(&geom, vx.data(), vw.data(), g.data(), want);
                    if let Some(dx) = cg.dx {
                        accumulate(&mut grads, *x, Tensor::from_parts(vx.shape().to_vec(), dx));
                    }
                    if let Some(dw) = cg.dw {
                        accumulate(&mut grads, *w, Tensor::from_parts(vw.shape().to_vec(), dw));
                    }
                    if let (Some(db), Some(b)) = (cg.db, b) {
                        accumulate(&mut grads, *b, Tensor::from_parts(vec![geom.o], db));
                    }
                }
                Op::Concat { parts, axis } => {
                    let (outer, total, inner) = around_axis(out.shape(), *axis);
                    let mut offset = 0;
                    for p in parts {
                        let vp = val(*p);
                        let len = vp.shape()[*axis];
                        if rg(*p) {
                            let mut d = Vec::with_capacity(vp.len());
                            for o in 0..outer {
                                let base = (o * total + offset) * inner;
                                d.extend_from_slice(&g.data()[base..base + len * inner]);
                            }
                            accumulate(&mut grads, *p, Tensor::from_parts(vp.shape().to_vec(), d));
                        }
                        offset += len;
                    }
                }
                Op::Slice { x, axis, start } => {
                    let vx = val(*x);
                    let (outer, n, inner) = around_axis(vx.shape(), *axis);
                    let len = out.shape()[*axis];
                    let mut d = vec![R::zero(); vx.len()];
                    for o in 0..outer {
                        let base = (o * n + start) * inner;
                        d[base..base + len * inner]
                            .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                    }
                    accumulate(&mut grads, *x, Tensor::from_parts(vx.shape().to_vec(), d));
                }
                Op::AvgPool(a, k) => {
                    let va = val(*a);
                    let (p, h, w) = self.planes(va, *k, true)?;
                    let d = kernels::avg_pool_backward(g.data(), p, h, w, *k);
                    accumulate(&mut grads, *a, Tensor::from_parts(va.shape().to_vec(), d));
                }
                Op::Upsample(a, k) => {
                    let va = val(*a);
                    let (p, h, w) = self.planes(va, *k, false)?;
                    let d = kernels::upsample_nearest_backward(g.data(), p, h, w, *k);
                    accumulate(&mut grads, *a, Tensor::from_parts(va.shape().to_vec(), d));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients<R: Real = f32> {
    grads: Vec<Option<Tensor<R>>>,
}

impl<R: Real> Gradients<R> {
    /// Gradient of the loss with respect to `v`; `None` when `v` does not
    /// influence the loss or does not track gradients.
    pub fn get(&self, v: Var) -> Option<&Tensor<R>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn broadcasting_add_reduces_gradient() {
        let g = Graph::<f64>::new();
        let a = g.param(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = g.param(t(&[3], &[10.0, 20.0, 30.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let l = g.sum_all(g.square(c));
        let grads = g.backward(l).unwrap();
        // d/db_j = sum_i 2 c_ij
        assert_eq!(grads.get(b).unwrap().data(), &[50.0, 94.0, 138.0]);
        assert_eq!(grads.get(a).unwrap().shape(), &[2, 3]);
    }

    #[test]
    fn incompatible_broadcast_is_a_shape_error() {
        let g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2]));
        assert!(matches!(g.add(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let g = Graph::<f32>::new();
        let a = g.param(Tensor::zeros(vec![2]));
        assert!(matches!(g.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn concat_and_slice_roundtrip_gradients() {
        let g = Graph::<f64>::new();
        let a = g.param(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.param(t(&[2, 2, 2], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), vec![2, 3, 2]);
        assert_eq!(
            g.value(c).data(),
            &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]
        );
        let s = g.slice(c, 1, 1, 1).unwrap();
        assert_eq!(g.value(s).data(), &[5.0, 6.0, 9.0, 10.0]);
        let grads = g.backward(g.sum_all(s)).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[0.0; 4]);
        assert_eq!(
            grads.get(b).unwrap().data(),
            &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]
        );
    }
}

use std::cell::RefCell;
use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::rc::Rc;

use super::kernels::{self, ConvGeom, Layout};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Max,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Neg,
    Exp,
    Log,
    Sqrt,
    Relu,
    Gelu,
    Scale(f64),
    Shift(f64),
    ScaledRelu { alpha: f64, beta: f64 },
}

enum Op {
    Leaf,
    Binary(Binary, usize, usize),
    Unary(Unary, usize),
    Sum(usize),
    Max(usize, Vec<usize>),
    MatMul(usize, usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Broadcast(usize),
    Concat(Vec<usize>, usize),
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
    },
    Softmax(usize),
    LogSoftmax(usize),
    CrossEntropy {
        logits: usize,
        probs: Tensor,
        target: Tensor,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

/// Records every operation of one forward pass, in creation order.
///
/// Node ids increase monotonically, so the creation order is already a
/// topological order and the backward sweep is a single reverse pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` if `v` does not reach the loss.
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(v.id).and_then(Option::take)
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

fn last_axis_softmax(x: &Tensor) -> Tensor {
    let d = *x.shape().last().unwrap();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(d) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Record an input (parameter or constant).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Only nodes that reach `loss` receive a gradient; every other entry
    /// stays `None`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Contract("loss is recorded on a different tape".into()));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::ones(nodes[loss.id].value.shape()));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            backprop(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    match &mut grads[id] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn backprop(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |id: usize| -> &Tensor { &nodes[id].value };
    match &node.op {
        Op::Leaf => {}
        Op::Binary(kind, a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let out_shape = node.value.shape();
            let la = kernels::broadcast_layout(out_shape, ta.shape());
            let lb = kernels::broadcast_layout(out_shape, tb.shape());
            let n = g.numel();
            let (mut ga, mut gb) = (Vec::with_capacity(n), Vec::with_capacity(n));
            for ((oa, ob), &gi) in la.offsets(n).zip(lb.offsets(n)).zip(g.data()) {
                let (x, y) = (ta.data()[oa], tb.data()[ob]);
                let (da, db) = match kind {
                    Binary::Add => (gi, gi),
                    Binary::Sub => (gi, -gi),
                    Binary::Mul => (gi * y, gi * x),
                    Binary::Div => (gi / y, -gi * x / (y * y)),
                    Binary::Max => {
                        if x >= y {
                            (gi, 0.0)
                        } else {
                            (0.0, gi)
                        }
                    }
                };
                ga.push(da);
                gb.push(db);
            }
            let ga = Tensor::from_parts(out_shape.to_vec(), ga);
            let gb = Tensor::from_parts(out_shape.to_vec(), gb);
            accumulate(grads, *a, kernels::unbroadcast(&ga, ta.shape()));
            accumulate(grads, *b, kernels::unbroadcast(&gb, tb.shape()));
        }
        Op::Unary(kind, x) => {
            let tx = val(*x);
            let y = &node.value;
            let data = tx
                .data()
                .iter()
                .zip(y.data())
                .zip(g.data())
                .map(|((&xi, &yi), &gi)| match kind {
                    Unary::Neg => -gi,
                    Unary::Exp => gi * yi,
                    Unary::Log => gi / xi,
                    Unary::Sqrt => gi * 0.5 / yi,
                    Unary::Relu => {
                        if xi > 0.0 {
                            gi
                        } else {
                            0.0
                        }
                    }
                    Unary::Gelu => gi * gelu_grad(xi),
                    Unary::Scale(s) => gi * s,
                    Unary::Shift(_) => gi,
                    Unary::ScaledRelu { alpha, beta } => {
                        if xi + alpha > 0.0 {
                            gi * beta
                        } else {
                            0.0
                        }
                    }
                })
                .collect();
            accumulate(grads, *x, Tensor::from_parts(tx.shape().to_vec(), data));
        }
        Op::Sum(x) => {
            let tx = val(*x);
            let layout = kernels::broadcast_layout(tx.shape(), g.shape());
            let data = layout.offsets(tx.numel()).map(|o| g.data()[o]).collect();
            accumulate(grads, *x, Tensor::from_parts(tx.shape().to_vec(), data));
        }
        Op::Max(x, arg) => {
            let tx = val(*x);
            let mut data = vec![0.0; tx.numel()];
            for (o, &i) in arg.iter().enumerate() {
                data[i] += g.data()[o];
            }
            accumulate(grads, *x, Tensor::from_parts(tx.shape().to_vec(), data));
        }
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (ga, gb) = matmul_backward(ta, tb, g);
            accumulate(grads, *a, ga);
            accumulate(grads, *b, gb);
        }
        Op::Reshape(x) => {
            let tx = val(*x);
            accumulate(grads, *x, Tensor::from_parts(tx.shape().to_vec(), g.data().to_vec()));
        }
        Op::Permute(x, perm) => {
            accumulate(grads, *x, kernels::permute(g, &kernels::inverse_perm(perm)));
        }
        Op::Broadcast(x) => {
            let tx = val(*x);
            accumulate(grads, *x, kernels::unbroadcast(g, tx.shape()));
        }
        Op::Concat(inputs, axis) => {
            let shape = g.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let mut offset = 0;
            for &id in inputs {
                let t = val(id);
                let ext = t.shape()[*axis];
                let mut data = Vec::with_capacity(t.numel());
                for o in 0..outer {
                    let base = (o * shape[*axis] + offset) * inner;
                    data.extend_from_slice(&g.data()[base..base + ext * inner]);
                }
                offset += ext;
                accumulate(grads, id, Tensor::from_parts(t.shape().to_vec(), data));
            }
        }
        Op::Narrow { x, axis, start } => {
            let tx = val(*x);
            let shape = tx.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let len = g.shape()[*axis];
            let mut data = vec![0.0; tx.numel()];
            for o in 0..outer {
                let dst = (o * shape[*axis] + start) * inner;
                let src = o * len * inner;
                data[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
            }
            accumulate(grads, *x, Tensor::from_parts(shape.to_vec(), data));
        }
        Op::Softmax(x) => {
            let y = &node.value;
            let d = *y.shape().last().unwrap();
            let mut data = vec![0.0; y.numel()];
            for ((dst, yr), gr) in data.chunks_mut(d).zip(y.data().chunks(d)).zip(g.data().chunks(d)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..d {
                    dst[j] = yr[j] * (gr[j] - dot);
                }
            }
            accumulate(grads, *x, Tensor::from_parts(y.shape().to_vec(), data));
        }
        Op::LogSoftmax(x) => {
            let y = &node.value;
            let d = *y.shape().last().unwrap();
            let mut data = vec![0.0; y.numel()];
            for ((dst, yr), gr) in data.chunks_mut(d).zip(y.data().chunks(d)).zip(g.data().chunks(d)) {
                let total: f64 = gr.iter().sum();
                for j in 0..d {
                    dst[j] = gr[j] - yr[j].exp() * total;
                }
            }
            accumulate(grads, *x, Tensor::from_parts(y.shape().to_vec(), data));
        }
        Op::CrossEntropy { logits, probs, target } => {
            let batch = probs.shape()[0] as f64;
            let scale = g.data()[0] / batch;
            let grad = probs.zip_with(target, |p, q| (p - q) * scale).expect("same shape");
            accumulate(grads, *logits, grad);
        }
        Op::Conv2d { x, w, b, geom } => {
            let (tx, tw) = (val(*x), val(*w));
            let batch = tx.shape()[0];
            let out_c = tw.shape()[0];
            let (pl, ol) = (geom.patch_len(), geom.out_len());
            let img_len = geom.channels * geom.height * geom.width;
            let mut gx = vec![0.0; tx.numel()];
            let mut gw = vec![0.0; tw.numel()];
            let mut gb = vec![0.0; out_c];
            let mut cols = vec![0.0; pl * ol];
            let mut dcols = vec![0.0; pl * ol];
            for bi in 0..batch {
                let img = &tx.data()[bi * img_len..(bi + 1) * img_len];
                let gout = &g.data()[bi * out_c * ol..(bi + 1) * out_c * ol];
                geom.im2col(img, &mut cols);
                // dW += dOut · colsᵀ
                kernels::gemm(
                    out_c,
                    ol,
                    pl,
                    1.0,
                    (gout, ol as isize, 1),
                    (&cols, 1, ol as isize),
                    1.0,
                    (&mut gw, pl as isize, 1),
                );
                // dcols = Wᵀ · dOut
                kernels::gemm(
                    pl,
                    out_c,
                    ol,
                    1.0,
                    (tw.data(), 1, pl as isize),
                    (gout, ol as isize, 1),
                    0.0,
                    (&mut dcols, ol as isize, 1),
                );
                geom.col2im(&dcols, &mut gx[bi * img_len..(bi + 1) * img_len]);
                for (o, acc) in gb.iter_mut().enumerate() {
                    *acc += gout[o * ol..(o + 1) * ol].iter().sum::<f64>();
                }
            }
            accumulate(grads, *x, Tensor::from_parts(tx.shape().to_vec(), gx));
            accumulate(grads, *w, Tensor::from_parts(tw.shape().to_vec(), gw));
            if let Some(b) = b {
                accumulate(grads, *b, Tensor::from_parts(vec![out_c], gb));
            }
        }
    }
}

/// Split a matmul operand pair into (batch, m, k, n, shared-rhs).
fn matmul_dims(a: &[usize], b: &[usize]) -> Option<(usize, usize, usize, usize, bool)> {
    if a.len() < 2 || b.len() < 2 {
        return None;
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return None;
    }
    let batch: usize = a[..a.len() - 2].iter().product();
    if b.len() == 2 {
        Some((batch, m, k, n, true))
    } else if a[..a.len() - 2] == b[..b.len() - 2] {
        Some((batch, m, k, n, false))
    } else {
        None
    }
}

fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (batch, m, k, n, shared) = matmul_dims(a.shape(), b.shape()).ok_or_else(|| Error::Shape {
        op: "matmul",
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    })?;
    let mut shape = a.shape()[..a.rank() - 2].to_vec();
    shape.extend([m, n]);
    let mut out = vec![0.0; batch * m * n];
    if shared {
        kernels::gemm(
            batch * m,
            k,
            n,
            1.0,
            (a.data(), k as isize, 1),
            (b.data(), n as isize, 1),
            0.0,
            (&mut out, n as isize, 1),
        );
    } else {
        for i in 0..batch {
            kernels::gemm(
                m,
                k,
                n,
                1.0,
                (&a.data()[i * m * k..], k as isize, 1),
                (&b.data()[i * k * n..], n as isize, 1),
                0.0,
                (&mut out[i * m * n..], n as isize, 1),
            );
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (batch, m, k, n, shared) = matmul_dims(a.shape(), b.shape()).expect("checked in forward");
    let mut ga = vec![0.0; a.numel()];
    let mut gb = vec![0.0; b.numel()];
    if shared {
        let rows = batch * m;
        // dA = dC · Bᵀ
        kernels::gemm(
            rows,
            n,
            k,
            1.0,
            (g.data(), n as isize, 1),
            (b.data(), 1, n as isize),
            0.0,
            (&mut ga, k as isize, 1),
        );
        // dB = Aᵀ · dC
        kernels::gemm(
            k,
            rows,
            n,
            1.0,
            (a.data(), 1, k as isize),
            (g.data(), n as isize, 1),
            0.0,
            (&mut gb, n as isize, 1),
        );
    } else {
        for i in 0..batch {
            let gi = &g.data()[i * m * n..];
            kernels::gemm(
                m,
                n,
                k,
                1.0,
                (gi, n as isize, 1),
                (&b.data()[i * k * n..], 1, n as isize),
                0.0,
                (&mut ga[i * m * k..], k as isize, 1),
            );
            kernels::gemm(
                k,
                m,
                n,
                1.0,
                (&a.data()[i * m * k..], 1, k as isize),
                (gi, n as isize, 1),
                0.0,
                (&mut gb[i * k * n..], n as isize, 1),
            );
        }
    }
    (
        Tensor::from_parts(a.shape().to_vec(), ga),
        Tensor::from_parts(b.shape().to_vec(), gb),
    )
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn check_same_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Contract("operands recorded on different tapes".into()))
        }
    }

    fn binary(&self, other: &Var<'t>, kind: Binary, name: &'static str) -> Result<Var<'t>> {
        self.check_same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        let shape = kernels::broadcast_shape(name, a.shape(), b.shape())?;
        let la = kernels::broadcast_layout(&shape, a.shape());
        let lb = kernels::broadcast_layout(&shape, b.shape());
        let numel: usize = shape.iter().product();
        let f: fn(f64, f64) -> f64 = match kind {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
            Binary::Div => |x, y| x / y,
            Binary::Max => |x, y| if x >= y { x } else { y },
        };
        let data = match (&la, &lb) {
            (Layout::Same, Layout::Same) => a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
            _ => la
                .offsets(numel)
                .zip(lb.offsets(numel))
                .map(|(i, j)| f(a.data()[i], b.data()[j]))
                .collect(),
        };
        Ok(self
            .tape
            .push(Tensor::from_parts(shape, data), Op::Binary(kind, self.id, other.id)))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Add, "add")
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Sub, "sub")
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Mul, "mul")
    }

    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Div, "div")
    }

    /// Elementwise maximum; ties route the gradient to `self`.
    pub fn maximum(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Max, "maximum")
    }

    fn unary(&self, kind: Unary) -> Var<'t> {
        let x = self.value();
        let f = |v: f64| match kind {
            Unary::Neg => -v,
            Unary::Exp => v.exp(),
            Unary::Log => v.ln(),
            Unary::Sqrt => v.sqrt(),
            Unary::Relu => v.max(0.0),
            Unary::Gelu => gelu(v),
            Unary::Scale(s) => v * s,
            Unary::Shift(s) => v + s,
            Unary::ScaledRelu { alpha, beta } => beta * (v + alpha).max(0.0),
        };
        self.tape.push(x.map(f), Op::Unary(kind, self.id))
    }

    pub fn neg(&self) -> Var<'t> {
        self.unary(Unary::Neg)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Unary::Exp)
    }

    pub fn log(&self) -> Result<Var<'t>> {
        if let Some(bad) = self.value().data().iter().find(|&&v| v < 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("negative input {bad}"),
            });
        }
        Ok(self.unary(Unary::Log))
    }

    pub fn sqrt(&self) -> Result<Var<'t>> {
        if let Some(bad) = self.value().data().iter().find(|&&v| v < 0.0) {
            return Err(Error::Domain {
                op: "sqrt",
                detail: format!("negative input {bad}"),
            });
        }
        Ok(self.unary(Unary::Sqrt))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Unary::Relu)
    }

    /// Exact `x·Φ(x)` form.
    pub fn gelu(&self) -> Var<'t> {
        self.unary(Unary::Gelu)
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        self.unary(Unary::Scale(s))
    }

    pub fn shift(&self, s: f64) -> Var<'t> {
        self.unary(Unary::Shift(s))
    }

    /// `beta * max(x + alpha, 0)` elementwise.
    pub fn scaled_relu(&self, alpha: f64, beta: f64) -> Var<'t> {
        self.unary(Unary::ScaledRelu { alpha, beta })
    }

    pub fn square(&self) -> Result<Var<'t>> {
        self.mul(self)
    }

    /// Sum over `axes`; reduced axes are dropped unless `keepdim`.
    pub fn sum(&self, axes: &[usize], keepdim: bool) -> Result<Var<'t>> {
        let x = self.value();
        let axes = kernels::normalize_axes("sum", axes, x.rank())?;
        let out = kernels::reduce_sum(&x, &axes);
        let v = self.tape.push(out, Op::Sum(self.id));
        if keepdim {
            Ok(v)
        } else {
            v.reshape(&kernels::squeeze_shape(x.shape(), &axes))
        }
    }

    pub fn sum_all(&self) -> Result<Var<'t>> {
        let rank = self.value().rank();
        self.sum(&(0..rank).collect::<Vec<_>>(), false)
    }

    pub fn mean(&self, axes: &[usize], keepdim: bool) -> Result<Var<'t>> {
        let x = self.value();
        let axes = kernels::normalize_axes("mean", axes, x.rank())?;
        let count: usize = axes.iter().map(|&a| x.shape()[a]).product();
        Ok(self.sum(&axes, keepdim)?.scale(1.0 / count as f64))
    }

    pub fn mean_all(&self) -> Result<Var<'t>> {
        let rank = self.value().rank();
        self.mean(&(0..rank).collect::<Vec<_>>(), false)
    }

    /// Max over `axes`; the gradient flows to the first maximal element.
    pub fn max(&self, axes: &[usize], keepdim: bool) -> Result<Var<'t>> {
        let x = self.value();
        let axes = kernels::normalize_axes("max", axes, x.rank())?;
        let (out, arg) = kernels::reduce_max(&x, &axes);
        let v = self.tape.push(out, Op::Max(self.id, arg));
        if keepdim {
            Ok(v)
        } else {
            v.reshape(&kernels::squeeze_shape(x.shape(), &axes))
        }
    }

    /// `[..., m, k] · [k, n]` (shared right operand) or batched
    /// `[..., m, k] · [..., k, n]` with identical leading extents.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(other)?;
        let out = matmul_forward(&self.value(), &other.value())?;
        Ok(self.tape.push(out, Op::MatMul(self.id, other.id)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if shape.iter().product::<usize>() != x.numel() || shape.contains(&0) {
            return Err(Error::Shape {
                op: "reshape",
                lhs: x.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(self.tape.push(
            Tensor::from_parts(shape.to_vec(), x.data().to_vec()),
            Op::Reshape(self.id),
        ))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..x.rank()).collect::<Vec<_>>() {
            return Err(Error::Contract(format!(
                "invalid permutation {perm:?} for rank {}",
                x.rank()
            )));
        }
        Ok(self
            .tape
            .push(kernels::permute(&x, perm), Op::Permute(self.id, perm.to_vec())))
    }

    /// Swap the last two axes.
    pub fn transpose_last(&self) -> Result<Var<'t>> {
        let rank = self.value().rank();
        if rank < 2 {
            return Err(Error::Contract("transpose of rank < 2".into()));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(&perm)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let target = kernels::broadcast_shape("broadcast_to", x.shape(), shape)?;
        if target != shape {
            return Err(Error::Shape {
                op: "broadcast_to",
                lhs: x.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let layout = kernels::broadcast_layout(shape, x.shape());
        let numel: usize = shape.iter().product();
        let data = layout.offsets(numel).map(|o| x.data()[o]).collect();
        Ok(self
            .tape
            .push(Tensor::from_parts(shape.to_vec(), data), Op::Broadcast(self.id)))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
        let rank = values[0].rank();
        if axis >= rank {
            return Err(Error::Axis {
                op: "concat",
                axis,
                rank,
            });
        }
        for (p, v) in parts.iter().zip(&values) {
            first.check_same_tape(p)?;
            let mismatch = v.rank() != rank || (0..rank).any(|ax| ax != axis && v.shape()[ax] != values[0].shape()[ax]);
            if mismatch {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: values[0].shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
        }
        let mut shape = values[0].shape().to_vec();
        shape[axis] = values.iter().map(|v| v.shape()[axis]).sum();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in &values {
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(first.tape.push(Tensor::from_parts(shape, data), Op::Concat(ids, axis)))
    }

    /// Copy of `len` entries along `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape();
        if axis >= shape.len() {
            return Err(Error::Axis {
                op: "narrow",
                axis,
                rank: shape.len(),
            });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(Error::Contract(format!(
                "narrow [{start}, {}) outside extent {} on axis {axis}",
                start + len,
                shape[axis]
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        Ok(self.tape.push(
            Tensor::from_parts(out_shape, data),
            Op::Narrow {
                x: self.id,
                axis,
                start,
            },
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Var<'t> {
        let y = last_axis_softmax(&self.value());
        self.tape.push(y, Op::Softmax(self.id))
    }

    pub fn log_softmax(&self) -> Var<'t> {
        let x = self.value();
        let d = *x.shape().last().unwrap();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.tape
            .push(Tensor::from_parts(x.shape().to_vec(), out), Op::LogSoftmax(self.id))
    }

    /// Mean cross-entropy of `[B, C]` logits against class labels, with
    /// optional label smoothing.
    pub fn cross_entropy(&self, labels: &[usize], smoothing: f64) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() != 2 || x.shape()[0] != labels.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: x.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let classes = x.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Contract(format!("label {bad} outside [0, {classes})")));
        }
        let probs = last_axis_softmax(&x);
        let mut target = vec![smoothing / classes as f64; x.numel()];
        for (i, &l) in labels.iter().enumerate() {
            target[i * classes + l] += 1.0 - smoothing;
        }
        let mut loss = 0.0;
        for (row, trow) in x.data().chunks(classes).zip(target.chunks(classes)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += row
                .iter()
                .zip(trow)
                .filter(|(_, &q)| q != 0.0)
                .map(|(&v, &q)| q * (lse - v))
                .sum::<f64>();
        }
        loss /= labels.len() as f64;
        let target = Tensor::from_parts(x.shape().to_vec(), target);
        Ok(self.tape.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: self.id,
                probs,
                target,
            },
        ))
    }

    /// 2-D cross-correlation of `[B, C, H, W]` with `[O, C, k, k]` plus an
    /// optional `[O]` bias.
    pub fn conv2d(&self, weight: &Var<'t>, bias: Option<&Var<'t>>, stride: usize, padding: usize) -> Result<Var<'t>> {
        self.check_same_tape(weight)?;
        let (x, w) = (self.value(), weight.value());
        let shape_err = || Error::Shape {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        };
        if x.rank() != 4 || w.rank() != 4 || x.shape()[1] != w.shape()[1] || w.shape()[2] != w.shape()[3] {
            return Err(shape_err());
        }
        let (batch, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let out_c = w.shape()[0];
        let geom = ConvGeom::new(c, h, wd, w.shape()[2], stride, padding).ok_or_else(shape_err)?;
        let bias_val = match bias {
            Some(b) => {
                self.check_same_tape(b)?;
                let bv = b.value();
                if bv.shape() != [out_c] {
                    return Err(Error::Shape {
                        op: "conv2d bias",
                        lhs: w.shape().to_vec(),
                        rhs: bv.shape().to_vec(),
                    });
                }
                Some(bv)
            }
            None => None,
        };
        let (pl, ol) = (geom.patch_len(), geom.out_len());
        let img_len = c * h * wd;
        let mut out = vec![0.0; batch * out_c * ol];
        let mut cols = vec![0.0; pl * ol];
        for bi in 0..batch {
            geom.im2col(&x.data()[bi * img_len..(bi + 1) * img_len], &mut cols);
            let dst = &mut out[bi * out_c * ol..(bi + 1) * out_c * ol];
            if let Some(bv) = &bias_val {
                for (o, chunk) in dst.chunks_mut(ol).enumerate() {
                    chunk.fill(bv.data()[o]);
                }
            }
            kernels::gemm(
                out_c,
                pl,
                ol,
                1.0,
                (w.data(), pl as isize, 1),
                (&cols, ol as isize, 1),
                1.0,
                (dst, ol as isize, 1),
            );
        }
        Ok(self.tape.push(
            Tensor::from_parts(vec![batch, out_c, geom.out_h, geom.out_w], out),
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                b: bias.map(|b| b.id),
                geom,
            },
        ))
    }
}

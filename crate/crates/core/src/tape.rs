//! Define-by-run reverse-mode differentiation.
//!
//! Every operation on a [`Var`] evaluates eagerly and appends one node to its
//! [`Tape`]. Nodes only reference earlier nodes, so the tape is always in
//! topological order and [`Tape::backward`] is a single reverse sweep.
//!
//! Convolutions are cross-correlations (the kernel is not flipped). Apart
//! from scalar-with-tensor operations there is no broadcasting; per-channel
//! and per-row biases have dedicated ops.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;
use std::sync::Arc;

use crate::kernels::{self, ConvDims};
use crate::params::ParamSet;
use crate::real::Real;
use crate::tensor::{shape_err, Result, Tensor, TensorError};

/// A linear map applied independently to every trailing `in_shape` block of
/// its input. The tape differentiates through it using the adjoint.
pub trait LinearOp<T: Real>: Send + Sync {
    fn name(&self) -> &str;
    fn in_shape(&self) -> Vec<usize>;
    fn out_shape(&self) -> Vec<usize>;
    /// `out` holds `batch` output blocks and is overwritten.
    fn apply(&self, x: &[T], batch: usize, out: &mut [T]);
    /// Exact transpose of [`LinearOp::apply`].
    fn apply_adjoint(&self, y: &[T], batch: usize, out: &mut [T]);
}

enum Op<T: Real> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Log { a: usize, floor: T },
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    Concat { parts: Vec<usize>, axis: usize },
    Narrow { a: usize, axis: usize, start: usize },
    Matmul(usize, usize),
    Conv2d { x: usize, k: usize, dims: ConvDims },
    ChannelBias { x: usize, b: usize },
    RowBias { x: usize, b: usize },
    MaxPool2 { a: usize, argmax: Vec<usize> },
    Upsample2(usize),
    Softmax(usize),
    Linear { a: usize, op: Arc<dyn LinearOp<T>>, adjoint: bool },
}

struct Node<T: Real> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording of one forward evaluation.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// The variables a [`ParamSet`] was bound to on one tape.
pub struct Bound<'t, 'p, T: Real> {
    params: &'p ParamSet<T>,
    vars: BTreeMap<String, Var<'t, T>>,
}

impl<'t, T: Real> Bound<'t, '_, T> {
    pub fn get(&self, name: &str) -> Result<Var<'t, T>> {
        self.vars.get(name).copied().ok_or_else(|| TensorError::Invalid {
            op: "param lookup",
            detail: format!("no parameter named {name:?}"),
        })
    }

    pub fn params(&self) -> &ParamSet<T> {
        self.params
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var<'t, T>)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, needs_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// A value that is never differentiated.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Records every tensor of `params` as a differentiable leaf.
    pub fn bind<'t, 'p>(&'t self, params: &'p ParamSet<T>) -> Bound<'t, 'p, T> {
        let vars = params
            .iter()
            .map(|(name, t)| (name.to_string(), self.leaf(t.clone())))
            .collect();
        Bound { params, vars }
    }

    /// Gradients of `loss` with respect to every bound parameter. Parameters
    /// that did not influence the loss get zero gradients.
    pub fn backward(&self, loss: Var<'_, T>, params: &Bound<'_, '_, T>) -> Result<BTreeMap<String, Tensor<T>>> {
        let ids: Vec<usize> = params.vars.values().map(|v| v.id).collect();
        let grads = self.grad(loss, &ids)?;
        Ok(params.vars.keys().cloned().zip(grads).collect())
    }

    /// Gradients of `loss` with respect to arbitrary recorded variables.
    pub fn grad_of(&self, loss: Var<'_, T>, wrt: &[Var<'_, T>]) -> Result<Vec<Tensor<T>>> {
        let ids: Vec<usize> = wrt.iter().map(|v| v.id).collect();
        self.grad(loss, &ids)
    }

    fn grad(&self, loss: Var<'_, T>, wrt: &[usize]) -> Result<Vec<Tensor<T>>> {
        let nodes = self.nodes.borrow();
        let lv = &nodes[loss.id].value;
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(lv.shape(), T::one()));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            for (input, gi) in backward_node(&nodes, node, &g)? {
                if !nodes[input].needs_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.axpy(T::one(), &gi),
                    slot @ None => *slot = Some(gi),
                }
            }
            if wrt.contains(&id) {
                grads[id] = Some(g);
            }
        }
        Ok(wrt
            .iter()
            .map(|&id| {
                grads
                    .get_mut(id)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(nodes[id].value.shape()))
            })
            .collect())
    }
}

fn backward_node<T: Real>(nodes: &[Node<T>], node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(usize, Tensor<T>)>> {
    let val = |id: usize| -> &Tensor<T> { &nodes[id].value };
    let needs = |id: usize| nodes[id].needs_grad;
    let out = &node.value;
    let mut res = Vec::with_capacity(2);
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            res.push((*a, g.clone()));
            res.push((*b, g.clone()));
        }
        Op::Sub(a, b) => {
            res.push((*a, g.clone()));
            res.push((*b, g.scale(-T::one())));
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                res.push((*a, g.zip_map(val(*b), |g, v| g * v)?));
            }
            if needs(*b) {
                res.push((*b, g.zip_map(val(*a), |g, v| g * v)?));
            }
        }
        Op::Scale(a, s) => res.push((*a, g.scale(*s))),
        Op::AddScalar(a) => res.push((*a, g.clone())),
        Op::Relu(a) => res.push((*a, g.zip_map(out, |g, y| if y > T::zero() { g } else { T::zero() })?)),
        Op::Sigmoid(a) => res.push((*a, g.zip_map(out, |g, y| g * y * (T::one() - y))?)),
        Op::Exp(a) => res.push((*a, g.zip_map(out, |g, y| g * y)?)),
        Op::Log { a, floor } => {
            let f = *floor;
            res.push((*a, g.zip_map(val(*a), |g, x| if x > f { g / x } else { T::zero() })?));
        }
        Op::Sum(a) => res.push((*a, Tensor::full(val(*a).shape(), g.item()))),
        Op::Mean(a) => {
            let n = T::of(val(*a).len() as f64);
            res.push((*a, Tensor::full(val(*a).shape(), g.item() / n)));
        }
        Op::Reshape(a) => res.push((*a, g.clone().reshape(val(*a).shape())?)),
        Op::Concat { parts, axis } => {
            let shapes: Vec<Vec<usize>> = parts.iter().map(|&p| val(p).shape().to_vec()).collect();
            for (pieces, (&p, _)) in split_axis(g, &shapes, *axis).into_iter().zip(parts.iter().zip(&shapes)) {
                res.push((p, pieces));
            }
        }
        Op::Narrow { a, axis, start } => {
            let src = val(*a).shape();
            let outer: usize = src[..*axis].iter().product();
            let inner: usize = src[axis + 1..].iter().product();
            let len = g.shape()[*axis];
            let mut d = Tensor::zeros(src);
            let dd = d.data_mut();
            for o in 0..outer {
                let dst = (o * src[*axis] + start) * inner;
                let from = o * len * inner;
                dd[dst..dst + len * inner].copy_from_slice(&g.data()[from..from + len * inner]);
            }
            res.push((*a, d));
        }
        Op::Matmul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if needs(*a) {
                let mut da = vec![T::zero(); m * k];
                T::gemm(m, n, k, T::one(), (g.data(), n as isize, 1), (bv.data(), 1, n as isize), T::zero(), (&mut da, k as isize, 1));
                res.push((*a, Tensor::new(&[m, k], da)?));
            }
            if needs(*b) {
                let mut db = vec![T::zero(); k * n];
                T::gemm(k, m, n, T::one(), (av.data(), 1, k as isize), (g.data(), n as isize, 1), T::zero(), (&mut db, n as isize, 1));
                res.push((*b, Tensor::new(&[k, n], db)?));
            }
        }
        Op::Conv2d { x, k, dims } => {
            let (dx, dk) = kernels::conv2d_backward(val(*x).data(), val(*k).data(), g.data(), dims, needs(*x), needs(*k));
            if let Some(dx) = dx {
                res.push((*x, Tensor::new(val(*x).shape(), dx)?));
            }
            if let Some(dk) = dk {
                res.push((*k, Tensor::new(val(*k).shape(), dk)?));
            }
        }
        Op::ChannelBias { x, b } => {
            res.push((*x, g.clone()));
            if needs(*b) {
                let s = g.shape();
                let (n, c, hw) = (s[0], s[1], s[2..].iter().product::<usize>());
                let mut db = vec![T::zero(); c];
                for i in 0..n {
                    for (ch, acc) in db.iter_mut().enumerate() {
                        *acc += g.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().copied().sum();
                    }
                }
                res.push((*b, Tensor::new(&[c], db)?));
            }
        }
        Op::RowBias { x, b } => {
            res.push((*x, g.clone()));
            if needs(*b) {
                let f = g.shape()[1];
                let mut db = vec![T::zero(); f];
                for row in g.data().chunks(f) {
                    for (acc, &v) in db.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                res.push((*b, Tensor::new(&[f], db)?));
            }
        }
        Op::MaxPool2 { a, argmax } => {
            let mut d = Tensor::zeros(val(*a).shape());
            let dd = d.data_mut();
            for (&idx, &gv) in argmax.iter().zip(g.data()) {
                dd[idx] += gv;
            }
            res.push((*a, d));
        }
        Op::Upsample2(a) => {
            let s = val(*a).shape();
            let (h, w) = (s[2], s[3]);
            let d = kernels::upsample2_backward(g.data(), s[0] * s[1], h, w);
            res.push((*a, Tensor::new(s, d)?));
        }
        Op::Softmax(a) => {
            let cols = *out.shape().last().unwrap();
            let mut d = vec![T::zero(); out.len()];
            for ((gr, yr), dr) in g.data().chunks(cols).zip(out.data().chunks(cols)).zip(d.chunks_mut(cols)) {
                let dot: T = gr.iter().zip(yr).map(|(&g, &y)| g * y).sum();
                for ((dv, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                    *dv = yv * (gv - dot);
                }
            }
            res.push((*a, Tensor::new(out.shape(), d)?));
        }
        Op::Linear { a, op, adjoint } => {
            let src = val(*a).shape();
            let batch = batch_of(src, &if *adjoint { op.out_shape() } else { op.in_shape() });
            let mut d = vec![T::zero(); val(*a).len()];
            if *adjoint {
                op.apply(g.data(), batch, &mut d);
            } else {
                op.apply_adjoint(g.data(), batch, &mut d);
            }
            res.push((*a, Tensor::new(src, d)?));
        }
    }
    Ok(res)
}

fn batch_of(shape: &[usize], block: &[usize]) -> usize {
    let lead = shape.len() - block.len();
    shape[..lead].iter().product()
}

fn split_axis<T: Real>(g: &Tensor<T>, shapes: &[Vec<usize>], axis: usize) -> Vec<Tensor<T>> {
    let gs = g.shape();
    let outer: usize = gs[..axis].iter().product();
    let inner: usize = gs[axis + 1..].iter().product();
    let total = gs[axis];
    let mut offset = 0;
    shapes
        .iter()
        .map(|s| {
            let len = s[axis];
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let from = (o * total + offset) * inner;
                data.extend_from_slice(&g.data()[from..from + len * inner]);
            }
            offset += len;
            Tensor::new(s, data).expect("split shape")
        })
        .collect()
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Fails with a diagnostic if any entry is NaN or infinite.
    pub fn check_finite(&self, what: impl FnOnce() -> String) -> Result<Self> {
        if self.value().all_finite() {
            Ok(*self)
        } else {
            Err(TensorError::NonFinite(what()))
        }
    }

    fn unary(&self, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        self.tape.push(value, op, self.tape.needs(self.id))
    }

    fn binary(&self, other: &Var<'t, T>, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        let needs = self.tape.needs(self.id) || self.tape.needs(other.id);
        self.tape.push(value, op, needs)
    }

    fn same_shape(&self, other: &Var<'t, T>, op: &'static str) -> Result<()> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(shape_err(op, format!("{a:?} vs {b:?}")));
        }
        Ok(())
    }

    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_shape(other, "add")?;
        let v = self.value().zip_map(&other.value(), |a, b| a + b)?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_shape(other, "sub")?;
        let v = self.value().zip_map(&other.value(), |a, b| a - b)?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_shape(other, "mul")?;
        let v = self.value().zip_map(&other.value(), |a, b| a * b)?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    pub fn scale(&self, s: T) -> Var<'t, T> {
        self.unary(self.value().scale(s), Op::Scale(self.id, s))
    }

    pub fn add_scalar(&self, s: T) -> Var<'t, T> {
        self.unary(self.value().map(|v| v + s), Op::AddScalar(self.id))
    }

    pub fn relu(&self) -> Var<'t, T> {
        self.unary(self.value().map(|v| v.max(T::zero())), Op::Relu(self.id))
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        let v = self.value().map(|v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        });
        self.unary(v, Op::Sigmoid(self.id))
    }

    pub fn exp(&self) -> Var<'t, T> {
        self.unary(self.value().map(T::exp), Op::Exp(self.id))
    }

    /// Natural logarithm. Inputs are clamped to the smallest positive normal
    /// value so the result stays finite.
    pub fn log(&self) -> Var<'t, T> {
        self.log_floor(T::min_positive_value())
    }

    /// `log(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log_floor(&self, floor: T) -> Var<'t, T> {
        let v = self.value().map(|x| x.max(floor).ln());
        self.unary(v, Op::Log { a: self.id, floor })
    }

    pub fn square(&self) -> Var<'t, T> {
        self.mul(self).expect("same shape")
    }

    pub fn sum(&self) -> Var<'t, T> {
        self.unary(Tensor::scalar(self.value().sum()), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t, T> {
        let v = self.value();
        let m = v.sum() / T::of(v.len() as f64);
        self.unary(Tensor::scalar(m), Op::Mean(self.id))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let v = (*self.value()).clone().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or_else(|| shape_err("concat", "no inputs"))?;
        let tape = first.tape;
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape()).collect();
        let base = &shapes[0];
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} out of range for {base:?}")));
        }
        for s in &shapes {
            let ok = s.len() == base.len()
                && s.iter().zip(base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err("concat", format!("{s:?} vs {base:?} along axis {axis}")));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = shapes.iter().map(|s| s[axis]).sum();
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, s) in values.iter().zip(&shapes) {
                let len = s[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let needs = parts.iter().any(|p| tape.needs(p.id));
        Ok(tape.push(
            Tensor::new(&shape, data)?,
            Op::Concat { parts: parts.iter().map(|p| p.id).collect(), axis },
            needs,
        ))
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let s = self.shape();
        if axis >= s.len() || start + len > s[axis] {
            return Err(shape_err("narrow", format!("{start}..{} on axis {axis} of {s:?}", start + len)));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let v = self.value();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * s[axis] + start) * inner;
            data.extend_from_slice(&v.data()[from..from + len * inner]);
        }
        let mut shape = s.clone();
        shape[axis] = len;
        Ok(self.unary(Tensor::new(&shape, data)?, Op::Narrow { a: self.id, axis, start }))
    }

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(shape_err("matmul", format!("{a:?} x {b:?}")));
        }
        let (m, k, n) = (a[0], a[1], b[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            (self.value().data(), k as isize, 1),
            (other.value().data(), n as isize, 1),
            T::zero(),
            (&mut out, n as isize, 1),
        );
        Ok(self.binary(other, Tensor::new(&[m, n], out)?, Op::Matmul(self.id, other.id)))
    }

    /// `input[N,C,H,W] (*) kernel[F,C,kH,kW]` with zero padding, unit stride.
    pub fn conv2d(&self, kernel: &Var<'t, T>, padding: usize) -> Result<Var<'t, T>> {
        let (x, k) = (self.shape(), kernel.shape());
        if x.len() != 4 || k.len() != 4 {
            return Err(shape_err("conv2d", format!("input {x:?} and kernel {k:?} must both be rank 4")));
        }
        if x[1] != k[1] {
            return Err(shape_err("conv2d", format!("input {x:?} has {} channels, kernel {k:?} expects {}", x[1], k[1])));
        }
        if k[2] % 2 == 0 || k[3] % 2 == 0 {
            return Err(shape_err("conv2d", format!("kernel {k:?} must have odd spatial extents")));
        }
        if x[2] + 2 * padding < k[2] || x[3] + 2 * padding < k[3] {
            return Err(shape_err("conv2d", format!("kernel {k:?} larger than padded input {x:?}")));
        }
        let dims = ConvDims { n: x[0], c: x[1], h: x[2], w: x[3], f: k[0], kh: k[2], kw: k[3], pad: padding };
        let out = kernels::conv2d_forward(self.value().data(), kernel.value().data(), &dims);
        let shape = [dims.n, dims.f, dims.out_h(), dims.out_w()];
        Ok(self.binary(kernel, Tensor::new(&shape, out)?, Op::Conv2d { x: self.id, k: kernel.id, dims }))
    }

    /// Adds `bias[C]` to every channel plane of `self[N,C,...]`.
    pub fn add_channel_bias(&self, bias: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (s, b) = (self.shape(), bias.shape());
        if s.len() < 2 || b != [s[1]] {
            return Err(shape_err("add_channel_bias", format!("input {s:?}, bias {b:?}")));
        }
        let hw: usize = s[2..].iter().product();
        let bv = bias.value();
        let mut v = (*self.value()).clone();
        for (i, plane) in v.data_mut().chunks_mut(hw).enumerate() {
            let add = bv.data()[i % s[1]];
            plane.iter_mut().for_each(|p| *p += add);
        }
        Ok(self.binary(bias, v, Op::ChannelBias { x: self.id, b: bias.id }))
    }

    /// Adds `bias[F]` to every row of `self[N,F]`.
    pub fn add_row_bias(&self, bias: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (s, b) = (self.shape(), bias.shape());
        if s.len() != 2 || b != [s[1]] {
            return Err(shape_err("add_row_bias", format!("input {s:?}, bias {b:?}")));
        }
        let bv = bias.value();
        let mut v = (*self.value()).clone();
        for row in v.data_mut().chunks_mut(s[1]) {
            row.iter_mut().zip(bv.data()).for_each(|(r, &b)| *r += b);
        }
        Ok(self.binary(bias, v, Op::RowBias { x: self.id, b: bias.id }))
    }

    /// 2x2 max pooling, stride 2, on `[N,C,H,W]`.
    pub fn max_pool2d(&self) -> Result<Var<'t, T>> {
        let s = self.shape();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(shape_err("max_pool2d", format!("expected [N,C,H>=2,W>=2], got {s:?}")));
        }
        let (out, argmax) = kernels::max_pool2(self.value().data(), s[0] * s[1], s[2], s[3]);
        let v = Tensor::new(&[s[0], s[1], s[2] / 2, s[3] / 2], out)?;
        Ok(self.unary(v, Op::MaxPool2 { a: self.id, argmax }))
    }

    /// Nearest-neighbour 2x upsampling of `[N,C,H,W]`.
    pub fn upsample2(&self) -> Result<Var<'t, T>> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(shape_err("upsample2", format!("expected rank 4, got {s:?}")));
        }
        let out = kernels::upsample2(self.value().data(), s[0] * s[1], s[2], s[3]);
        Ok(self.unary(Tensor::new(&[s[0], s[1], 2 * s[2], 2 * s[3]], out)?, Op::Upsample2(self.id)))
    }

    /// Softmax along the last axis.
    pub fn softmax(&self) -> Result<Var<'t, T>> {
        let s = self.shape();
        let cols = *s.last().ok_or_else(|| shape_err("softmax", "scalar input"))?;
        let out = kernels::softmax_rows(self.value().data(), cols);
        Ok(self.unary(Tensor::new(&s, out)?, Op::Softmax(self.id)))
    }

    fn linear_impl(&self, op: &Arc<dyn LinearOp<T>>, adjoint: bool) -> Result<Var<'t, T>> {
        let s = self.shape();
        let (src, dst) = if adjoint { (op.out_shape(), op.in_shape()) } else { (op.in_shape(), op.out_shape()) };
        if s.len() < src.len() || s[s.len() - src.len()..] != src[..] {
            return Err(shape_err(
                if adjoint { "linear adjoint" } else { "linear" },
                format!("{} expects trailing shape {src:?}, got {s:?}", op.name()),
            ));
        }
        let lead = &s[..s.len() - src.len()];
        let batch: usize = lead.iter().product();
        let mut shape = lead.to_vec();
        shape.extend_from_slice(&dst);
        let mut out = vec![T::zero(); shape.iter().product()];
        if adjoint {
            op.apply_adjoint(self.value().data(), batch, &mut out);
        } else {
            op.apply(self.value().data(), batch, &mut out);
        }
        Ok(self.unary(Tensor::new(&shape, out)?, Op::Linear { a: self.id, op: Arc::clone(op), adjoint }))
    }

    /// Applies a linear operator to every trailing block.
    pub fn linear(&self, op: &Arc<dyn LinearOp<T>>) -> Result<Var<'t, T>> {
        self.linear_impl(op, false)
    }

    /// Applies the adjoint of a linear operator to every trailing block.
    pub fn linear_adjoint(&self, op: &Arc<dyn LinearOp<T>>) -> Result<Var<'t, T>> {
        self.linear_impl(op, true)
    }
}

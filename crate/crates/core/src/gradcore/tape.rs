use super::real::gemm_slices;
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul { batched: bool },
    Add { bias: bool },
    Sub,
    Mul,
    Scale(f64),
    AddScalar,
    Relu,
    Sigmoid,
    Softplus,
    Exp,
    Log,
    Sin,
    Cos,
    Sum { axis: Option<usize> },
    Mean { axis: Option<usize> },
    Softmax,
    Concat { axis: usize },
    Slice { axis: usize, start: usize },
    Reshape,
    Transpose,
    Gather { index: Vec<usize> },
    StopGradient,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddScalar => "add_scalar",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Softplus => "softplus",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sin => "sin",
            Op::Cos => "cos",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Softmax => "softmax",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape => "reshape",
            Op::Transpose => "transpose",
            Op::Gather { .. } => "gather",
            Op::StopGradient => "stop_gradient",
        }
    }
}

struct Node<T> {
    op: Op,
    inputs: Vec<Var>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Define-by-run record of primitive operations.
///
/// Nodes are appended in creation order, so every op's inputs precede it and
/// [`Tape::backward`] can walk the record in exact reverse.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// `(outer, n, inner)` split of a shape around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>, value: Tensor<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = !matches!(op, Op::StopGradient)
            && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable leaf: receives a gradient from [`Tape::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    fn unary(&mut self, op: Op, x: Var, f: impl Fn(T) -> T) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push(op, vec![x], value)
    }

    /// Matrix product over the last two axes.
    ///
    /// `a` is `[.., n, k]`; `b` is either a shared `[k, m]` matrix or has the
    /// same leading (batch) axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let bad = || Error::shape("matmul", format!("{sa:?} x {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(bad());
        }
        let (n, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, m) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(bad());
        }
        let batched = sb.len() > 2;
        if batched && sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(bad());
        }
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(m);
        let mut out = vec![T::zero(); out_shape.iter().product()];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        if batched {
            let batch = av.len() / (n * k).max(1);
            for i in 0..batch {
                gemm_slices(
                    n,
                    k,
                    m,
                    &av[i * n * k..(i + 1) * n * k],
                    false,
                    &bv[i * k * m..(i + 1) * k * m],
                    false,
                    &mut out[i * n * m..(i + 1) * n * m],
                    false,
                );
            }
        } else {
            let rows: usize = sa[..sa.len() - 1].iter().product();
            gemm_slices(rows, k, m, av, false, bv, false, &mut out, false);
        }
        let value = Tensor::new(out_shape, out)?;
        self.push(Op::MatMul { batched }, vec![a, b], value)
    }

    /// Elementwise sum; `b` may also be a rank-1 bias matching the last axis of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
            let value = Tensor::new(sa.to_vec(), data)?;
            return self.push(Op::Add { bias: false }, vec![a, b], value);
        }
        if sb.len() == 1 && !sa.is_empty() && sa[sa.len() - 1] == sb[0] {
            let width = sb[0];
            let bias = self.value(b).data();
            let data = self
                .value(a)
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| x + bias[i % width])
                .collect();
            let value = Tensor::new(sa.to_vec(), data)?;
            return self.push(Op::Add { bias: true }, vec![a, b], value);
        }
        Err(Error::shape("add", format!("{sa:?} + {sb:?}")))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape("sub", format!("{sa:?} - {sb:?}")));
        }
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        let value = Tensor::new(sa.to_vec(), data)?;
        self.push(Op::Sub, vec![a, b], value)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape("mul", format!("{sa:?} * {sb:?}")));
        }
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let value = Tensor::new(sa.to_vec(), data)?;
        self.push(Op::Mul, vec![a, b], value)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let k = T::of(c);
        self.unary(Op::Scale(c), x, |v| v * k)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let k = T::of(c);
        self.unary(Op::AddScalar, x, |v| v + k)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Relu, x, |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Sigmoid, x, sigmoid)
    }

    /// `ln(1 + e^x)`, evaluated stably as `max(x, 0) + ln(1 + e^{-|x|})`.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Softplus, x, |v| v.max(T::zero()) + (-v.abs()).exp().ln_1p())
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Exp, x, |v| v.exp())
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Log, x, |v| v.ln())
    }

    pub fn sin(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Sin, x, |v| v.sin())
    }

    pub fn cos(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Cos, x, |v| v.cos())
    }

    /// Sum over one axis (removed from the shape) or over everything.
    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        let value = self.reduce(x, axis, "sum", T::one())?;
        self.push(Op::Sum { axis }, vec![x], value)
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        let shape = self.shape(x);
        let count = match axis {
            Some(a) if a < shape.len() => shape[a],
            _ => shape.iter().product(),
        };
        if count == 0 {
            return Err(Error::shape("mean", format!("empty reduction over {shape:?}")));
        }
        let value = self.reduce(x, axis, "mean", T::one() / T::of(count as f64))?;
        self.push(Op::Mean { axis }, vec![x], value)
    }

    fn reduce(&self, x: Var, axis: Option<usize>, op: &'static str, k: T) -> Result<Tensor<T>> {
        let t = self.value(x);
        match axis {
            None => Ok(Tensor::scalar(t.data().iter().copied().sum::<T>() * k)),
            Some(a) => {
                if a >= t.rank() {
                    return Err(Error::shape(op, format!("axis {a} of {:?}", t.shape())));
                }
                let (outer, n, inner) = split_axis(t.shape(), a);
                let mut out = vec![T::zero(); outer * inner];
                let d = t.data();
                for o in 0..outer {
                    for i in 0..n {
                        let src = &d[(o * n + i) * inner..(o * n + i + 1) * inner];
                        for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *acc += v;
                        }
                    }
                }
                out.iter_mut().for_each(|v| *v *= k);
                let mut shape = t.shape().to_vec();
                shape.remove(a);
                Tensor::new(shape, out)
            }
        }
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() == 0 {
            return Err(Error::shape("softmax", "scalar input"));
        }
        let width = t.shape()[t.rank() - 1];
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(width.max(1)) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v = *v / total);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push(Op::Softmax, vec![x], value)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} of {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape(
                    "concat",
                    format!("{s:?} vs {base:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let n = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        self.push(Op::Concat { axis }, parts.to_vec(), value)
    }

    /// `x[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() || start > end || end > t.shape()[axis] {
            return Err(Error::shape(
                "slice",
                format!("{start}..{end} on axis {axis} of {:?}", t.shape()),
            ));
        }
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let width = end - start;
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            out.extend_from_slice(&t.data()[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = width;
        let value = Tensor::new(shape, out)?;
        self.push(Op::Slice { axis, start }, vec![x], value)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        self.push(Op::Reshape, vec![x], value)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() < 2 {
            return Err(Error::shape("transpose", format!("{:?}", t.shape())));
        }
        let r = t.rank();
        let (rows, cols) = (t.shape()[r - 2], t.shape()[r - 1]);
        let out = transpose_batched(t.data(), rows, cols);
        let mut shape = t.shape().to_vec();
        shape.swap(r - 2, r - 1);
        let value = Tensor::new(shape, out)?;
        self.push(Op::Transpose, vec![x], value)
    }

    /// Flat-index gather: `out[i] = x.data[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if let Some(bad) = index.iter().find(|&&i| i >= t.len()) {
            return Err(Error::shape(
                "gather",
                format!("index {bad} out of range for {:?}", t.shape()),
            ));
        }
        let out = index.iter().map(|&i| t.data()[i]).collect();
        let value = Tensor::new(shape.to_vec(), out)?;
        self.push(Op::Gather { index }, vec![x], value)
    }

    /// Forward identity that blocks gradient flow into `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).clone();
        self.push(Op::StopGradient, vec![x], value)
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Nodes are visited in exact reverse creation order; contributions to a
    /// node are summed in the order its consumers are visited.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_shape = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                match (&node.op, g) {
                    (Op::Leaf, Some(g)) => Tensor::new(node.value.shape().to_vec(), g).ok(),
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let inputs = &node.inputs;
        let needs = |i: usize| self.nodes[inputs[i].0].requires_grad;
        let val = |i: usize| self.nodes[inputs[i].0].value.data();
        let out = node.value.data();
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul { batched } => {
                let sa = self.nodes[inputs[0].0].value.shape();
                let sb = self.nodes[inputs[1].0].value.shape();
                let k = sa[sa.len() - 1];
                let m = sb[sb.len() - 1];
                let (a, b) = (val(0), val(1));
                if *batched {
                    let n = sa[sa.len() - 2];
                    let batch = out.len() / (n * m).max(1);
                    if needs(0) {
                        let ga = acc(grads, inputs[0], a.len());
                        for i in 0..batch {
                            gemm_slices(
                                n,
                                m,
                                k,
                                &g[i * n * m..(i + 1) * n * m],
                                false,
                                &b[i * k * m..(i + 1) * k * m],
                                true,
                                &mut ga[i * n * k..(i + 1) * n * k],
                                true,
                            );
                        }
                    }
                    if needs(1) {
                        let gb = acc(grads, inputs[1], b.len());
                        for i in 0..batch {
                            gemm_slices(
                                k,
                                n,
                                m,
                                &a[i * n * k..(i + 1) * n * k],
                                true,
                                &g[i * n * m..(i + 1) * n * m],
                                false,
                                &mut gb[i * k * m..(i + 1) * k * m],
                                true,
                            );
                        }
                    }
                } else {
                    let rows = out.len() / m.max(1);
                    if needs(0) {
                        let ga = acc(grads, inputs[0], a.len());
                        gemm_slices(rows, m, k, g, false, b, true, ga, true);
                    }
                    if needs(1) {
                        let gb = acc(grads, inputs[1], b.len());
                        gemm_slices(k, rows, m, a, true, g, false, gb, true);
                    }
                }
            }
            Op::Add { bias } => {
                if needs(0) {
                    add_into(acc(grads, inputs[0], g.len()), g);
                }
                if needs(1) {
                    if *bias {
                        let width = val(1).len();
                        let gb = acc(grads, inputs[1], width);
                        for row in g.chunks(width) {
                            add_into(gb, row);
                        }
                    } else {
                        add_into(acc(grads, inputs[1], g.len()), g);
                    }
                }
            }
            Op::Sub => {
                if needs(0) {
                    add_into(acc(grads, inputs[0], g.len()), g);
                }
                if needs(1) {
                    let gb = acc(grads, inputs[1], g.len());
                    gb.iter_mut().zip(g).for_each(|(d, &s)| *d -= s);
                }
            }
            Op::Mul => {
                let (a, b) = (val(0), val(1));
                if needs(0) {
                    let ga = acc(grads, inputs[0], g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * b[i];
                    }
                }
                if needs(1) {
                    let gb = acc(grads, inputs[1], g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * a[i];
                    }
                }
            }
            Op::Scale(c) => {
                let k = T::of(*c);
                let ga = acc(grads, inputs[0], g.len());
                ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s * k);
            }
            Op::AddScalar | Op::Reshape => add_into(acc(grads, inputs[0], g.len()), g),
            Op::Relu => {
                let a = val(0);
                let ga = acc(grads, inputs[0], g.len());
                for i in 0..g.len() {
                    if a[i] > T::zero() {
                        ga[i] += g[i];
                    }
                }
            }
            Op::Sigmoid => {
                let ga = acc(grads, inputs[0], g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * out[i] * (T::one() - out[i]);
                }
            }
            Op::Softplus => {
                let a = val(0);
                let ga = acc(grads, inputs[0], g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * sigmoid(a[i]);
                }
            }
            Op::Exp => {
                let ga = acc(grads, inputs[0], g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * out[i];
                }
            }
            Op::Log => {
                let a = val(0);
                let ga = acc(grads, inputs[0], g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] / a[i];
                }
            }
            Op::Sin => {
                let a = val(0);
                let ga = acc(grads, inputs[0], g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * a[i].cos();
                }
            }
            Op::Cos => {
                let a = val(0);
                let ga = acc(grads, inputs[0], g.len());
                for i in 0..g.len() {
                    ga[i] -= g[i] * a[i].sin();
                }
            }
            Op::Sum { axis } | Op::Mean { axis } => {
                let src = &self.nodes[inputs[0].0].value;
                let k = match (&node.op, axis) {
                    (Op::Mean { .. }, None) => T::one() / T::of(src.len() as f64),
                    (Op::Mean { .. }, Some(a)) => T::one() / T::of(src.shape()[*a] as f64),
                    _ => T::one(),
                };
                let ga = acc(grads, inputs[0], src.len());
                match axis {
                    None => ga.iter_mut().for_each(|d| *d += g[0] * k),
                    Some(a) => {
                        let (outer, n, inner) = split_axis(src.shape(), *a);
                        for o in 0..outer {
                            let gs = &g[o * inner..(o + 1) * inner];
                            for i in 0..n {
                                let dst = &mut ga[(o * n + i) * inner..(o * n + i + 1) * inner];
                                dst.iter_mut().zip(gs).for_each(|(d, &s)| *d += s * k);
                            }
                        }
                    }
                }
            }
            Op::Softmax => {
                let width = node.value.shape()[node.value.rank() - 1].max(1);
                let ga = acc(grads, inputs[0], g.len());
                for ((gr, yr), dr) in g
                    .chunks(width)
                    .zip(out.chunks(width))
                    .zip(ga.chunks_mut(width))
                {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for i in 0..width {
                        dr[i] += yr[i] * (gr[i] - dot);
                    }
                }
            }
            Op::Concat { axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for (p, v) in inputs.iter().enumerate() {
                    let n = self.nodes[v.0].value.shape()[*axis];
                    if needs(p) {
                        let len = self.nodes[v.0].value.len();
                        let gp = acc(grads, *v, len);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                            add_into(&mut gp[o * n * inner..(o + 1) * n * inner], src);
                        }
                    }
                    offset += n;
                }
            }
            Op::Slice { axis, start } => {
                let src = &self.nodes[inputs[0].0].value;
                let (outer, n, inner) = split_axis(src.shape(), *axis);
                let width = node.value.shape()[*axis];
                let ga = acc(grads, inputs[0], src.len());
                for o in 0..outer {
                    let dst = &mut ga[(o * n + start) * inner..(o * n + start + width) * inner];
                    add_into(dst, &g[o * width * inner..(o + 1) * width * inner]);
                }
            }
            Op::Transpose => {
                let s = node.value.shape();
                let r = s.len();
                let back = transpose_batched(g, s[r - 2], s[r - 1]);
                add_into(acc(grads, inputs[0], g.len()), &back);
            }
            Op::Gather { index } => {
                let len = self.nodes[inputs[0].0].value.len();
                let ga = acc(grads, inputs[0], len);
                for (i, &src) in index.iter().enumerate() {
                    ga[src] += g[i];
                }
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`], retained for leaf nodes only.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if the loss reaches it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`] but returns zeros shaped like `v` when unreachable.
    pub fn wrt(&self, tape: &Tape<T>, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.shape(v).to_vec()))
    }
}

fn acc<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn zip_map<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn transpose_batched<T: Real>(data: &[T], rows: usize, cols: usize) -> Vec<T> {
    let block = rows * cols;
    let mut out = vec![T::zero(); data.len()];
    if block == 0 {
        return out;
    }
    for (src, dst) in data.chunks(block).zip(out.chunks_mut(block)) {
        for r in 0..rows {
            for c in 0..cols {
                dst[c * rows + r] = src[r * cols + c];
            }
        }
    }
    out
}

pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

//! Reverse-mode automatic differentiation on an explicit tape.
//!
//! Every value produced while a [`Tape`] is alive is stored on it and named by
//! a [`Var`]. Operations whose inputs require gradients record enough
//! information to run their adjoint; everything else is stored as a plain
//! value. [`Tape::backward`] walks the records in reverse order and
//! accumulates gradients into the requires-grad leaves.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{Scalar, Tensor};

/// Class id excluded from the cross-entropy average.
pub const IGNORE_LABEL: u8 = 255;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Primitive kinds understood by [`Tape::forward_primitive`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Conv2d { stride: usize },
    Relu,
    Sum,
    Mean,
    Max,
    FrobeniusNormSquared,
    Transpose,
    Concat { axis: usize },
    Scale(f64),
    UpsampleBilinear { factor: usize },
}

#[derive(Debug)]
enum Op<T> {
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, T),
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        input: usize,
        kernel: usize,
        bias: Option<usize>,
        geom: ConvGeom,
    },
    Relu(usize),
    Sum(usize),
    Mean(usize),
    Max {
        a: usize,
        argmax: usize,
    },
    FrobSq(usize),
    Reshape(usize),
    Transpose {
        a: usize,
        rows: usize,
        cols: usize,
    },
    Concat {
        inputs: Vec<usize>,
        outer: usize,
        inner_sizes: Vec<usize>,
    },
    Upsample {
        a: usize,
        dims: (usize, usize, usize),
        factor: usize,
    },
    SoftmaxCe {
        logits: usize,
        probs: Vec<T>,
        labels: Vec<u8>,
        classes: usize,
        valid: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Option<Op<T>>,
    /// Accumulated gradient; only populated on requires-grad leaves.
    grad: Option<Vec<T>>,
}

/// Cumulative leaf gradients returned by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    tape: u64,
    by_index: BTreeMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        if var.tape != self.tape {
            return None;
        }
        self.by_index.get(&var.index)
    }

    pub fn len(&self) -> usize {
        self.by_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_index.is_empty()
    }
}

#[derive(Debug)]
pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, None)
    }

    /// A leaf that participates in differentiation.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[self.check(var)].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[self.check(var)].requires_grad
    }

    /// Accumulated gradient of a leaf, if any has been computed.
    pub fn grad(&self, var: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[self.check(var)];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn check(&self, var: Var) -> usize {
        assert_eq!(var.tape, self.id, "Var belongs to a different tape");
        var.index
    }

    fn owns(&self, var: Var) -> bool {
        var.tape == self.id && var.index < self.nodes.len()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Option<Op<T>>) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            requires_grad,
            op: if requires_grad { op } else { None },
            grad: None,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<(usize, usize, Tensor<T>)> {
        let (ia, ib) = (self.check(a), self.check(b));
        self.same_shape(name, ia, ib)?;
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((ia, ib, Tensor::new(va.shape().to_vec(), data)?))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, out) = self.zip_with(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(out, rg, Some(Op::Add(ia, ib))))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, out) = self.zip_with(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(out, rg, Some(Op::Sub(ia, ib))))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, out) = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(out, rg, Some(Op::Mul(ia, ib))))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, out) = self.zip_with(a, b, "div", |x, y| x / y)?;
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(out, rg, Some(Op::Div(ia, ib))))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let ia = self.check(a);
        let out = self.nodes[ia].value.map(|v| v * s);
        let rg = self.rg(&[ia]);
        self.push(out, rg, Some(Op::Scale(ia, s)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ia = self.check(a);
        let out = self.nodes[ia].value.map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(&[ia]);
        self.push(out, rg, Some(Op::Relu(ia)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let ia = self.check(a);
        let out = Tensor::scalar(self.nodes[ia].value.sum());
        let rg = self.rg(&[ia]);
        self.push(out, rg, Some(Op::Sum(ia)))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ia = self.check(a);
        let out = Tensor::scalar(self.nodes[ia].value.mean());
        let rg = self.rg(&[ia]);
        self.push(out, rg, Some(Op::Mean(ia)))
    }

    /// Largest entry; the gradient flows to its first occurrence.
    pub fn max(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a);
        let data = self.nodes[ia].value.data();
        if data.is_empty() {
            return Err(Error::invalid_shape(self.nodes[ia].value.shape(), "max of empty tensor"));
        }
        let mut argmax = 0;
        for (i, &v) in data.iter().enumerate() {
            if v > data[argmax] {
                argmax = i;
            }
        }
        let out = Tensor::scalar(data[argmax]);
        let rg = self.rg(&[ia]);
        Ok(self.push(out, rg, Some(Op::Max { a: ia, argmax })))
    }

    pub fn frobenius_norm_squared(&mut self, a: Var) -> Var {
        let ia = self.check(a);
        let out = Tensor::scalar(self.nodes[ia].value.data().iter().map(|&v| v * v).sum());
        let rg = self.rg(&[ia]);
        self.push(out, rg, Some(Op::FrobSq(ia)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.check(a);
        let out = self.nodes[ia].value.clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[ia]);
        Ok(self.push(out, rg, Some(Op::Reshape(ia))))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a);
        let (rows, cols) = self.nodes[ia].value.dims2()?;
        let src = self.nodes[ia].value.data();
        let mut data = vec![T::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = src[r * cols + c];
            }
        }
        let out = Tensor::new([cols, rows], data)?;
        let rg = self.rg(&[ia]);
        Ok(self.push(out, rg, Some(Op::Transpose { a: ia, rows, cols })))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a), self.check(b));
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (m, k) = va.dims2()?;
        let (k2, n) = vb.dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", va.shape(), vb.shape()));
        }
        let mut data = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), va.data(), k as isize, 1, vb.data(), n as isize, 1, T::zero(), &mut data, n as isize, 1);
        let out = Tensor::new([m, n], data)?;
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(out, rg, Some(Op::MatMul { a: ia, b: ib, m, k, n })))
    }

    /// Cross-correlation of a `(c_in, h, w)` input with an `(c_out, c_in, k, k)`
    /// kernel, zero padding `k / 2`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let (ii, ik) = (self.check(input), self.check(kernel));
        let ib = bias.map(|b| self.check(b));
        let geom = ConvGeom::new(self.nodes[ii].value.shape(), self.nodes[ik].value.shape(), stride)?;
        if let Some(ib) = ib {
            let bshape = self.nodes[ib].value.shape();
            if bshape != [geom.cout] {
                return Err(Error::shape("conv2d bias", bshape, &[geom.cout]));
            }
        }
        let data = kernels::conv2d_forward(
            &geom,
            self.nodes[ii].value.data(),
            self.nodes[ik].value.data(),
            ib.map(|b| self.nodes[b].value.data()),
        );
        let out = Tensor::new([geom.cout, geom.ho, geom.wo], data)?;
        let mut ids = vec![ii, ik];
        ids.extend(ib);
        let rg = self.rg(&ids);
        Ok(self.push(out, rg, Some(Op::Conv2d { input: ii, kernel: ik, bias: ib, geom })))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let ids: Vec<usize> = parts.iter().map(|&v| self.check(v)).collect();
        let first = match ids.first() {
            Some(&i) => self.nodes[i].value.shape().to_vec(),
            None => return Err(Error::invalid_shape(&[], "concat of zero tensors")),
        };
        if axis >= first.len() {
            return Err(Error::invalid_shape(&first, format!("concat axis {axis} out of range")));
        }
        let outer: usize = first[..axis].iter().product();
        let mut inner_sizes = Vec::with_capacity(ids.len());
        let mut axis_total = 0;
        for &i in &ids {
            let s = self.nodes[i].value.shape();
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(Error::shape("concat", &first, s));
            }
            axis_total += s[axis];
            inner_sizes.push(s[axis..].iter().product::<usize>());
        }
        let mut data = Vec::with_capacity(outer * inner_sizes.iter().sum::<usize>());
        for o in 0..outer {
            for (&i, &sz) in ids.iter().zip(&inner_sizes) {
                data.extend_from_slice(&self.nodes[i].value.data()[o * sz..(o + 1) * sz]);
            }
        }
        let mut shape = first;
        shape[axis] = axis_total;
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(&ids);
        Ok(self.push(out, rg, Some(Op::Concat { inputs: ids, outer, inner_sizes })))
    }

    /// Bilinear upsampling of a `(c, h, w)` tensor by an integer factor.
    pub fn upsample_bilinear(&mut self, a: Var, factor: usize) -> Result<Var> {
        let ia = self.check(a);
        let dims = self.nodes[ia].value.dims3()?;
        if factor == 0 {
            return Err(Error::InvalidConfig("upsample factor must be >= 1".into()));
        }
        let data = kernels::upsample_bilinear(dims, factor, self.nodes[ia].value.data());
        let out = Tensor::new([dims.0, dims.1 * factor, dims.2 * factor], data)?;
        let rg = self.rg(&[ia]);
        Ok(self.push(out, rg, Some(Op::Upsample { a: ia, dims, factor })))
    }

    /// Mean over non-ignored pixels of `-log softmax(logits)[label]`.
    ///
    /// `logits` is `(classes, h, w)`; `labels` is `(h, w)` with
    /// [`IGNORE_LABEL`] marking pixels that do not contribute.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &Tensor<u8>) -> Result<Var> {
        let il = self.check(logits);
        let (classes, h, w) = self.nodes[il].value.dims3()?;
        if labels.shape() != [h, w] {
            return Err(Error::shape("softmax_cross_entropy", self.nodes[il].value.shape(), labels.shape()));
        }
        let pixels = h * w;
        let x = self.nodes[il].value.data();
        let mut probs = vec![T::zero(); classes * pixels];
        let mut total = 0.0f64;
        let mut valid = 0usize;
        for (p, &label) in labels.data().iter().enumerate() {
            if label == IGNORE_LABEL {
                continue;
            }
            if usize::from(label) >= classes {
                return Err(Error::LabelOutOfRange { label, classes });
            }
            let mx = (0..classes).map(|c| x[c * pixels + p]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for c in 0..classes {
                let e = (x[c * pixels + p] - mx).exp();
                probs[c * pixels + p] = e;
                z = z + e;
            }
            for c in 0..classes {
                probs[c * pixels + p] = probs[c * pixels + p] / z;
            }
            let lse = mx + z.ln();
            total += (lse - x[usize::from(label) * pixels + p]).as_f64();
            valid += 1;
        }
        if valid == 0 {
            return Err(Error::NoValidPixels);
        }
        let out = Tensor::scalar(T::from_f64_lossy(total / valid as f64));
        let rg = self.rg(&[il]);
        let op = Op::SoftmaxCe {
            logits: il,
            probs,
            labels: labels.data().to_vec(),
            classes,
            valid,
        };
        Ok(self.push(out, rg, Some(op)))
    }

    /// Dispatch by primitive kind, for callers that build graphs from data.
    pub fn forward_primitive(&mut self, kind: Primitive, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("{kind:?} takes {n} inputs, got {}", inputs.len())))
            }
        };
        match kind {
            Primitive::Add => arity(2).and_then(|_| self.add(inputs[0], inputs[1])),
            Primitive::Sub => arity(2).and_then(|_| self.sub(inputs[0], inputs[1])),
            Primitive::Mul => arity(2).and_then(|_| self.mul(inputs[0], inputs[1])),
            Primitive::Div => arity(2).and_then(|_| self.div(inputs[0], inputs[1])),
            Primitive::MatMul => arity(2).and_then(|_| self.matmul(inputs[0], inputs[1])),
            Primitive::Conv2d { stride } => match inputs.len() {
                2 => self.conv2d(inputs[0], inputs[1], None, stride),
                3 => self.conv2d(inputs[0], inputs[1], Some(inputs[2]), stride),
                n => Err(Error::InvalidConfig(format!("conv2d takes 2 or 3 inputs, got {n}"))),
            },
            Primitive::Relu => arity(1).map(|_| self.relu(inputs[0])),
            Primitive::Sum => arity(1).map(|_| self.sum(inputs[0])),
            Primitive::Mean => arity(1).map(|_| self.mean(inputs[0])),
            Primitive::Max => arity(1).and_then(|_| self.max(inputs[0])),
            Primitive::FrobeniusNormSquared => arity(1).map(|_| self.frobenius_norm_squared(inputs[0])),
            Primitive::Transpose => arity(1).and_then(|_| self.transpose(inputs[0])),
            Primitive::Concat { axis } => self.concat(inputs, axis),
            Primitive::Scale(s) => arity(1).map(|_| self.scale(inputs[0], T::from_f64_lossy(s))),
            Primitive::UpsampleBilinear { factor } => arity(1).and_then(|_| self.upsample_bilinear(inputs[0], factor)),
        }
    }

    /// Backpropagate from a scalar `root` and return the cumulative gradient
    /// of every requires-grad leaf. Calling again without
    /// [`zero_grad`](Self::zero_grad) adds to the previous gradients.
    pub fn backward(&mut self, root: Var) -> Result<Gradients<T>> {
        if !self.owns(root) {
            return Err(Error::DetachedRoot);
        }
        let r = root.index;
        let shape = self.nodes[r].value.shape();
        if self.nodes[r].value.numel() != 1 {
            return Err(Error::NonScalarRoot(shape.to_vec()));
        }
        if !self.nodes[r].requires_grad {
            return Err(Error::DetachedRoot);
        }

        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(r + 1, || None);
        grads[r] = Some(vec![T::one()]);

        for i in (0..=r).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                None => {
                    let node = &mut self.nodes[i];
                    match &mut node.grad {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &d)| *a = *a + d),
                        None => node.grad = Some(g),
                    }
                }
                Some(op) => self.propagate(op, &g, &mut grads),
            }
        }

        let by_index = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.requires_grad && n.op.is_none())
            .map(|(i, n)| {
                let g = n.grad.clone().unwrap_or_else(|| vec![T::zero(); n.value.numel()]);
                (i, Tensor::new(n.value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { tape: self.id, by_index })
    }

    fn propagate(&self, op: &Op<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let mut send = |idx: usize, contrib: Vec<T>| {
            if !nodes[idx].requires_grad {
                return;
            }
            match &mut grads[idx] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &d)| *a = *a + d),
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |idx: usize| nodes[idx].value.data();
        let needs = |idx: usize| nodes[idx].requires_grad;

        match *op {
            Op::Add(a, b) => {
                send(a, g.to_vec());
                send(b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(a, g.to_vec());
                if needs(b) {
                    send(b, g.iter().map(|&d| -d).collect());
                }
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    send(a, g.iter().zip(val(b)).map(|(&d, &y)| d * y).collect());
                }
                if needs(b) {
                    send(b, g.iter().zip(val(a)).map(|(&d, &x)| d * x).collect());
                }
            }
            Op::Div(a, b) => {
                if needs(a) {
                    send(a, g.iter().zip(val(b)).map(|(&d, &y)| d / y).collect());
                }
                if needs(b) {
                    let grad = g
                        .iter()
                        .zip(val(a).iter().zip(val(b)))
                        .map(|(&d, (&x, &y))| -d * x / (y * y))
                        .collect();
                    send(b, grad);
                }
            }
            Op::Scale(a, s) => send(a, g.iter().map(|&d| d * s).collect()),
            Op::Relu(a) => {
                let grad = g
                    .iter()
                    .zip(val(a))
                    .map(|(&d, &x)| if x > T::zero() { d } else { T::zero() })
                    .collect();
                send(a, grad);
            }
            Op::Sum(a) => send(a, vec![g[0]; val(a).len()]),
            Op::Mean(a) => {
                let n = val(a).len();
                send(a, vec![g[0] / T::from_usize(n).unwrap(); n]);
            }
            Op::Max { a, argmax } => {
                let mut grad = vec![T::zero(); val(a).len()];
                grad[argmax] = g[0];
                send(a, grad);
            }
            Op::FrobSq(a) => {
                let two = T::one() + T::one();
                send(a, val(a).iter().map(|&x| two * x * g[0]).collect());
            }
            Op::Reshape(a) => send(a, g.to_vec()),
            Op::Transpose { a, rows, cols } => {
                let mut grad = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        grad[r * cols + c] = g[c * rows + r];
                    }
                }
                send(a, grad);
            }
            Op::MatMul { a, b, m, k, n } => {
                if needs(a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, T::one(), g, n as isize, 1, val(b), 1, n as isize, T::zero(), &mut da, k as isize, 1);
                    send(a, da);
                }
                if needs(b) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, T::one(), val(a), 1, k as isize, g, n as isize, 1, T::zero(), &mut db, n as isize, 1);
                    send(b, db);
                }
            }
            Op::Conv2d { input, kernel, bias, geom } => {
                let need_bias = bias.is_some_and(needs);
                let out = kernels::conv2d_backward(&geom, val(input), val(kernel), g, (needs(input), needs(kernel), need_bias));
                if let Some(d) = out.input {
                    send(input, d);
                }
                if let Some(d) = out.kernel {
                    send(kernel, d);
                }
                if let (Some(b), Some(d)) = (bias, out.bias) {
                    send(b, d);
                }
            }
            Op::Concat { ref inputs, outer, ref inner_sizes } => {
                let row: usize = inner_sizes.iter().sum();
                let mut offset = 0;
                for (&i, &sz) in inputs.iter().zip(inner_sizes) {
                    if needs(i) {
                        let mut grad = Vec::with_capacity(outer * sz);
                        for o in 0..outer {
                            grad.extend_from_slice(&g[o * row + offset..o * row + offset + sz]);
                        }
                        send(i, grad);
                    }
                    offset += sz;
                }
            }
            Op::Upsample { a, dims, factor } => send(a, kernels::upsample_bilinear_adjoint(dims, factor, g)),
            Op::SoftmaxCe { logits, ref probs, ref labels, classes, valid } => {
                let pixels = labels.len();
                let scale = g[0] / T::from_usize(valid).unwrap();
                let mut grad = vec![T::zero(); classes * pixels];
                for (p, &label) in labels.iter().enumerate() {
                    if label == IGNORE_LABEL {
                        continue;
                    }
                    for c in 0..classes {
                        let onehot = if usize::from(label) == c { T::one() } else { T::zero() };
                        grad[c * pixels + p] = (probs[c * pixels + p] - onehot) * scale;
                    }
                }
                send(logits, grad);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_componentwise() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = tape.relu(a);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn matmul_of_ones() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::ones([2, 3]));
        let b = tape.constant(Tensor::ones([3, 2]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 2]);
        assert_eq!(tape.value(c).data(), &[3.0; 4]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([3, 2]));
        let msg = tape.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
        let err = tape.matmul(a, a).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2, 2], &[0.3, -1.0, 2.0, 5.0]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn frobenius_gradient_is_twice_input() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, -2.0]));
        let f = tape.frobenius_norm_squared(x);
        let g = tape.backward(f).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0]);
    }

    #[test]
    fn mean_relu_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[-1.0, 3.0]));
        let r = tape.relu(x);
        let m = tape.mean(r);
        let g = tape.backward(m).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.5]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1], &[0.0]));
        let r = tape.relu(x);
        let s = tape.sum(r);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn repeated_backward_accumulates_and_reset_is_bit_identical() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[0.1, 0.7, -0.4]));
        let y = tape.mul(x, x).unwrap();
        let s = tape.sum(y);
        let first = tape.backward(s).unwrap().get(x).unwrap().clone();
        let twice = tape.backward(s).unwrap().get(x).unwrap().clone();
        for (a, b) in first.data().iter().zip(twice.data()) {
            assert_eq!(*b, 2.0 * a);
        }
        tape.zero_grad();
        let again = tape.backward(s).unwrap().get(x).unwrap().clone();
        assert_eq!(first.data(), again.data());
    }

    #[test]
    fn backward_rejects_non_scalar_and_detached_roots() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarRoot(_))));
        let c = tape.constant(t(&[1], &[1.0]));
        assert!(matches!(tape.backward(c), Err(Error::DetachedRoot)));
        let mut other = Tape::<f64>::new();
        let y = other.param(t(&[1], &[1.0]));
        assert!(matches!(tape.backward(y), Err(Error::DetachedRoot)));
    }

    #[test]
    fn untracked_ops_are_not_recorded() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.relu(a);
        assert!(!tape.requires_grad(b));
        assert!(tape.nodes[b.index].op.is_none());
    }

    #[test]
    fn identity_pointwise_conv() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::from_f64([2, 3, 3], &(0..18).map(|i| i as f64 - 4.0).collect::<Vec<_>>()).unwrap());
        let k = tape.constant(t(&[2, 2, 1, 1], &[1.0, 0.0, 0.0, 1.0]));
        let y = tape.conv2d(x, k, None, 1).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn softmax_ce_uniform_and_saturated() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::<f64>::zeros([4, 2, 2]));
        let labels = Tensor::new([2, 2], vec![0u8, 1, 2, 3]).unwrap();
        let l = tape.softmax_cross_entropy(logits, &labels).unwrap();
        assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-12);

        let mut onehot = Tensor::<f64>::zeros([4, 2, 2]);
        for (p, &c) in labels.data().iter().enumerate() {
            onehot.data_mut()[usize::from(c) * 4 + p] = 20.0;
        }
        let logits = tape.constant(onehot);
        let l = tape.softmax_cross_entropy(logits, &labels).unwrap();
        assert!(tape.value(l).item() < 1e-6);
    }

    #[test]
    fn softmax_ce_errors() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::<f64>::zeros([4, 1, 2]));
        let ignored = Tensor::new([1, 2], vec![IGNORE_LABEL; 2]).unwrap();
        assert!(matches!(tape.softmax_cross_entropy(logits, &ignored), Err(Error::NoValidPixels)));
        let bad = Tensor::new([1, 2], vec![0u8, 4]).unwrap();
        assert!(matches!(tape.softmax_cross_entropy(logits, &bad), Err(Error::LabelOutOfRange { label: 4, classes: 4 })));
    }

    #[test]
    fn concat_splits_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[2, 1], &[1.0, 2.0]));
        let b = tape.param(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let w = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let p = tape.mul(c, w).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[1.0, 4.0]);
        assert_eq!(g.get(b).unwrap().data(), &[2.0, 3.0, 5.0, 6.0]);
    }

    #[test]
    fn primitive_dispatch_checks_arity() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[1], &[1.0]));
        assert!(tape.forward_primitive(Primitive::Add, &[a]).is_err());
        let s = tape.forward_primitive(Primitive::Scale(3.0), &[a]).unwrap();
        assert_eq!(tape.value(s).item(), 3.0);
    }
}

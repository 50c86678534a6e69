//! Reverse-mode automatic differentiation over recorded tensor operations.
//!
//! A [`Tape`] records every operation of one forward pass in execution order,
//! which is also a topological order: an operation can only consume values
//! that were recorded before it. [`Tape::backward`] walks the list in reverse
//! exactly once, accumulating `d(loss)/d(node)` into each node's inputs.
//!
//! Trainable tensors live in a [`ParamSet`] that the tape borrows, so
//! parameters are never copied during a forward pass. Only leaf gradients
//! (parameters and `requires_grad` inputs) survive into [`Gradients`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::loss::{check_pair, ftl_backward, ftl_forward, LossConfig};
use crate::ops::conv::{conv2d, conv2d_backward, Conv2dSpec};
use crate::ops::pointwise::{
    activate, activate_backward, binary, binary_backward, concat_channels, dense, dense_backward, split_flat,
    Activation, BinaryKind,
};
use crate::ops::pool::{global_avg_pool, global_avg_pool_backward, max_pool2, max_pool2_backward};
use crate::ops::resample::{resize, resize_backward, UpsampleMode};
use crate::params::{ParamId, ParamSet};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate backward defects, used to prove the gradient checker can fail.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BackwardFault {
    /// Scales every convolution kernel gradient by the given factor.
    ScaleConvKernelGrad(f64),
}

enum Value<T: Real> {
    Owned(Tensor<T>),
    Param(ParamId),
}

enum Op<T: Real> {
    Leaf,
    Binary { a: Var, b: Var, kind: BinaryKind },
    Scale { x: Var, factor: T },
    Conv2d { x: Var, kernel: Var, bias: Option<Var>, spec: Conv2dSpec },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    GlobalAvgPool { x: Var },
    Resize { x: Var, mode: UpsampleMode },
    Activation { x: Var, kind: Activation },
    Dense { x: Var, weight: Var, bias: Var },
    Concat { xs: Vec<Var> },
    Sum { x: Var },
    FocalTversky { p: Var, target: Tensor<T>, cfg: LossConfig },
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary { kind: BinaryKind::Add, .. } => "add",
            Op::Binary { kind: BinaryKind::Mul, .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2 { .. } => "max_pool2",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::Resize { .. } => "resize",
            Op::Activation { kind: Activation::Relu, .. } => "relu",
            Op::Activation { kind: Activation::Sigmoid, .. } => "sigmoid",
            Op::Dense { .. } => "dense",
            Op::Concat { .. } => "concat",
            Op::Sum { .. } => "sum",
            Op::FocalTversky { .. } => "focal_tversky",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Binary { a, b, .. } => vec![*a, *b],
            Op::Conv2d { x, kernel, bias, .. } => {
                let mut v = vec![*x, *kernel];
                v.extend(bias);
                v
            }
            Op::Dense { x, weight, bias } => vec![*x, *weight, *bias],
            Op::Concat { xs } => xs.clone(),
            Op::Scale { x, .. }
            | Op::MaxPool2 { x, .. }
            | Op::GlobalAvgPool { x }
            | Op::Resize { x, .. }
            | Op::Activation { x, .. }
            | Op::Sum { x } => vec![*x],
            Op::FocalTversky { p, .. } => vec![*p],
        }
    }
}

struct Node<T: Real> {
    value: Value<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// The recorded computation of one forward pass.
pub struct Tape<'p, T: Real> {
    params: Option<&'p ParamSet<T>>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    fault: Option<BackwardFault>,
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Self { params: Some(params), nodes: Vec::new(), param_vars: HashMap::new(), fault: None }
    }

    /// A tape with no parameter set; only [`Tape::leaf`] inputs.
    pub fn detached() -> Self {
        Self { params: None, nodes: Vec::new(), param_vars: HashMap::new(), fault: None }
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: BackwardFault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Operation names in recording order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    /// Input handles of a recorded node; each precedes the node itself.
    pub fn inputs_of(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.expect("param node without a parameter set").get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let needs_grad = op.inputs().iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node { value: Value::Owned(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records an input tensor; it is differentiated iff `requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let needs_grad = tensor.requires_grad();
        self.nodes.push(Node { value: Value::Owned(tensor), op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a tensor that never receives a gradient.
    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    /// The tape handle of a parameter; one leaf per parameter per tape.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(&id) {
            return Ok(v);
        }
        let params = self.params.ok_or_else(|| Error::arg("tape has no parameter set"))?;
        if id.0 >= params.len() {
            return Err(Error::arg(format!("unknown parameter #{}", id.0)));
        }
        self.nodes.push(Node { value: Value::Param(id), op: Op::Leaf, needs_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        Ok(v)
    }

    /// Elementwise `a + b`; `b` may broadcast over axes where it has extent 1.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    /// Elementwise `a * b`; `b` may broadcast over axes where it has extent 1.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let out = binary(self.value(a), self.value(b), kind)?;
        Ok(self.push(out, Op::Binary { a, b, kind }))
    }

    /// Sum of several same-shape values, left to right.
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs.split_first().ok_or_else(|| Error::arg("add_all of nothing"))?;
        let shape = self.shape(first);
        let mut acc = first;
        for &x in rest {
            if self.shape(x) != shape {
                return Err(Error::shape(format!("summand {:?} vs {:?}", self.shape(x), shape)));
            }
            acc = self.add(acc, x)?;
        }
        Ok(acc)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let factor = T::of(factor);
        let out = self.value(x).map(|v| v * factor);
        Ok(self.push(out, Op::Scale { x, factor }))
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let out = conv2d(self.value(x), self.value(kernel), bias.map(|b| self.value(b)), spec)?;
        Ok(self.push(out, Op::Conv2d { x, kernel, bias, spec }))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = max_pool2(self.value(x))?;
        Ok(self.push(out, Op::MaxPool2 { x, argmax }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = global_avg_pool(self.value(x));
        Ok(self.push(out, Op::GlobalAvgPool { x }))
    }

    pub fn upsample(&mut self, x: Var, factor: usize, mode: UpsampleMode) -> Result<Var> {
        if factor < 2 {
            return Err(Error::arg(format!("upsample factor must be >= 2, got {factor}")));
        }
        let s = self.shape(x);
        self.resize(x, s.h() * factor, s.w() * factor, mode)
    }

    pub fn resize(&mut self, x: Var, oh: usize, ow: usize, mode: UpsampleMode) -> Result<Var> {
        let out = resize(self.value(x), oh, ow, mode)?;
        Ok(self.push(out, Op::Resize { x, mode }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let out = activate(self.value(x), kind);
        Ok(self.push(out, Op::Activation { x, kind }))
    }

    pub fn dense(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = dense(self.value(x), self.value(weight), self.value(bias))?;
        Ok(self.push(out, Op::Dense { x, weight, bias }))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let out = concat_channels(&values)?;
        Ok(self.push(out, Op::Concat { xs: xs.to_vec() }))
    }

    /// Sum of all elements, as a `(1,1,1,1)` value.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        Ok(self.push(out, Op::Sum { x }))
    }

    /// Focal Tversky loss of probabilities `p` against a constant binary target.
    pub fn focal_tversky(&mut self, p: Var, target: &Tensor<T>, cfg: &LossConfig) -> Result<Var> {
        check_pair(self.value(p), target)?;
        let value = ftl_forward(self.value(p), target, cfg);
        let op = Op::FocalTversky { p, target: target.clone(), cfg: cfg.clone() };
        Ok(self.push(Tensor::scalar(T::of(value)), op))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.shape(loss) != Shape::scalar() {
            return Err(Error::arg(format!("backward needs a (1,1,1,1) loss, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dout) = grads[i].take() else { continue };
            let need = |v: &Var| self.nodes[v.0].needs_grad;
            let mut send = |v: Var, g: Vec<T>| accumulate(&mut grads[v.0], g);
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Binary { a, b, kind } => {
                    let (da, db) = binary_backward(self.value(*a), self.value(*b), *kind, &dout, [need(a), need(b)]);
                    da.map(|g| send(*a, g));
                    db.map(|g| send(*b, g));
                }
                Op::Scale { x, factor } => send(*x, dout.iter().map(|&g| g * *factor).collect()),
                Op::Conv2d { x, kernel, bias, spec } => {
                    let needs = [need(x), need(kernel), bias.as_ref().is_some_and(need)];
                    let g = conv2d_backward(self.value(*x), self.value(*kernel), *spec, &dout, needs);
                    g.dx.map(|d| send(*x, d));
                    if let Some(mut dk) = g.dkernel {
                        if let Some(BackwardFault::ScaleConvKernelGrad(f)) = self.fault {
                            dk.iter_mut().for_each(|v| *v = *v * T::of(f));
                        }
                        send(*kernel, dk);
                    }
                    if let (Some(b), Some(db)) = (bias, g.dbias) {
                        send(*b, db);
                    }
                }
                Op::MaxPool2 { x, argmax } => send(*x, max_pool2_backward(self.value(*x).len(), argmax, &dout)),
                Op::GlobalAvgPool { x } => send(*x, global_avg_pool_backward(self.shape(*x), &dout)),
                Op::Resize { x, mode } => {
                    let out = self.value(Var(i)).shape();
                    send(*x, resize_backward(self.shape(*x), out.h(), out.w(), *mode, &dout));
                }
                Op::Activation { x, kind } => send(*x, activate_backward(self.value(Var(i)), *kind, &dout)),
                Op::Dense { x, weight, bias } => {
                    let g = dense_backward(self.value(*x), self.value(*weight), &dout, [need(x), need(weight), need(bias)]);
                    g.dx.map(|d| send(*x, d));
                    g.dw.map(|d| send(*weight, d));
                    g.db.map(|d| send(*bias, d));
                }
                Op::Concat { xs } => {
                    let out = self.shape(Var(i));
                    let channels: Vec<usize> = xs.iter().map(|&v| self.shape(v).c()).collect();
                    for (v, part) in xs.iter().zip(split_flat(&dout, out, &channels)) {
                        if need(v) {
                            send(*v, part);
                        }
                    }
                }
                Op::Sum { x } => send(*x, vec![dout[0]; self.value(*x).len()]),
                Op::FocalTversky { p, target, cfg } => {
                    send(*p, ftl_backward(self.value(*p), target, cfg, dout[0].as_f64()));
                }
            }
        }

        let params = self.param_vars.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients { grads, params })
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a = *a + b;
            }
        }
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf recorded with `requires_grad`, or of a parameter.
    /// `None` when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.iter().find(|(p, _)| *p == id).and_then(|&(_, v)| self.wrt(v))
    }

    /// Every parameter that received a gradient.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[T])> + '_ {
        self.params.iter().filter_map(|&(id, v)| self.wrt(v).map(|g| (id, g)))
    }
}

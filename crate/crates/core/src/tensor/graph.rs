use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use super::kernels::{self, ConvParams, PoolParams};
use super::{Element, Result, Tensor, TensorError};

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T: Element> {
    Leaf,
    Conv {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        params: ConvParams,
    },
    Relu(usize),
    MaxPool {
        input: usize,
        argmax: Vec<u32>,
    },
    Concat(usize, usize),
    Fold(usize),
    PriorRows(usize),
    CatRows(Vec<usize>),
    Sum(usize),
    Dot(usize, Vec<T>),
    /// A scalar whose partial derivatives were computed alongside its value.
    Precomputed(Vec<usize>, Vec<Tensor<T>>),
}

impl<T: Element> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv { params, .. } if params.groups > 1 => "conv2d_grouped",
            Op::Conv { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::MaxPool { .. } => "maxpool2d",
            Op::Concat(..) => "channel_concat",
            Op::Fold(_) => "fold_stacked",
            Op::PriorRows(..) => "prior_rows",
            Op::CatRows(_) => "cat_rows",
            Op::Sum(_) => "sum",
            Op::Dot(..) => "dot",
            Op::Precomputed(..) => "loss",
        }
    }
}

#[derive(Debug)]
struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: bool,
}

/// Accumulated wall time per operator kind.
#[derive(Debug, Clone, Default)]
pub struct OpTimings {
    pub per_op: BTreeMap<&'static str, (usize, Duration)>,
}

impl OpTimings {
    pub fn total(&self) -> Duration {
        self.per_op.values().map(|(_, d)| *d).sum()
    }
}

/// Outcome of a reverse pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BackwardReport {
    /// Parameters the loss does not depend on; their gradients are zero.
    pub detached: Vec<Var>,
}

/// Append-only record of executed operators.
///
/// Leaves are created with [`Graph::param`] (trainable) or
/// [`Graph::input`]. Every operator method runs its forward kernel
/// immediately and returns a handle to the result. Built with
/// [`Graph::no_grad`], nothing is kept for a reverse pass.
#[derive(Debug)]
pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
    recording: bool,
    timings: Option<OpTimings>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            recording: true,
            timings: None,
        }
    }

    /// A graph for inference only: no reverse-pass bookkeeping.
    pub fn no_grad() -> Self {
        Graph {
            recording: false,
            ..Self::new()
        }
    }

    pub fn with_timings(mut self) -> Self {
        self.timings = Some(OpTimings::default());
        self
    }

    pub fn timings(&self) -> Option<&OpTimings> {
        self.timings.as_ref()
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let requires_grad = self.recording && inputs.iter().any(|&i| self.nodes[i].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool, param: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.recording,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true, true)
    }

    /// A constant leaf.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false, false)
    }

    /// A non-parameter leaf that still receives a gradient.
    pub fn input_with_grad(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[0]))
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    fn timed<R>(&mut self, name: &'static str, f: impl FnOnce(&Self) -> R) -> R {
        if self.timings.is_none() {
            return f(self);
        }
        let start = Instant::now();
        let r = f(self);
        let dt = start.elapsed();
        if let Some(t) = self.timings.as_mut() {
            let e = t.per_op.entry(name).or_default();
            e.0 += 1;
            e.1 += dt;
        }
        r
    }

    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, params: ConvParams) -> Result<Var> {
        let name = if params.groups > 1 { "conv2d_grouped" } else { "conv2d" };
        let out = self.timed(name, |g| {
            kernels::conv2d(g.value(x), g.value(weight), bias.map(|b| g.value(b)), params)
        })?;
        let mut ins = vec![x.0, weight.0];
        ins.extend(bias.map(|b| b.0));
        Ok(self.push(
            out,
            Op::Conv {
                input: x.0,
                weight: weight.0,
                bias: bias.map(|b| b.0),
                params,
            },
            &ins,
        ))
    }

    /// Depthwise 3x3-style convolution, rectifier, then a 1x1 pointwise convolution.
    #[allow(clippy::too_many_arguments)]
    pub fn separable_conv2d(
        &mut self,
        x: Var,
        depthwise_w: Var,
        depthwise_b: Option<Var>,
        pointwise_w: Var,
        pointwise_b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let channels = self.value(x).dims4("separable_conv2d")?[1];
        let dw = self.conv2d(x, depthwise_w, depthwise_b, ConvParams::new(stride, padding, channels))?;
        let act = self.relu(dw);
        self.conv2d(act, pointwise_w, pointwise_b, ConvParams::default())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.timed("relu", |g| kernels::relu(g.value(x)));
        self.push(out, Op::Relu(x.0), &[x.0])
    }

    pub fn maxpool2d_ceil(&mut self, x: Var, params: PoolParams) -> Result<Var> {
        let (out, argmax) = self.timed("maxpool2d", |g| kernels::maxpool2d_ceil(g.value(x), params))?;
        Ok(self.push(out, Op::MaxPool { input: x.0, argmax }, &[x.0]))
    }

    pub fn channel_concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.timed("channel_concat", |g| kernels::channel_concat(g.value(a), g.value(b)))?;
        Ok(self.push(out, Op::Concat(a.0, b.0), &[a.0, b.0]))
    }

    pub fn fold_stacked(&mut self, x: Var) -> Result<Var> {
        let out = self.timed("fold_stacked", |g| kernels::fold_stacked(g.value(x)))?;
        Ok(self.push(out, Op::Fold(x.0), &[x.0]))
    }

    /// (N, A*D, H, W) head output to (N, H*W*A, D) rows.
    pub fn prior_rows(&mut self, x: Var, d: usize) -> Result<Var> {
        let out = self.timed("prior_rows", |g| kernels::to_prior_rows(g.value(x), d))?;
        Ok(self.push(out, Op::PriorRows(x.0), &[x.0]))
    }

    pub fn cat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let out = self.timed("cat_rows", |g| {
            let refs: Vec<&Tensor<T>> = parts.iter().map(|&p| g.value(p)).collect();
            kernels::cat_rows(&refs)
        })?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(out, Op::CatRows(ids.clone()), &ids))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x.0), &[x.0])
    }

    /// `sum(x * weights)` for a constant weight buffer.
    pub fn dot(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        let v = self.value(x);
        if v.numel() != weights.len() {
            return Err(TensorError::ShapeMismatch {
                op: "dot",
                lhs: v.shape().to_vec(),
                rhs: vec![weights.len()],
            });
        }
        let s = v.data().iter().zip(&weights).fold(T::zero(), |a, (&x, &w)| a + x * w);
        Ok(self.push(Tensor::scalar(s), Op::Dot(x.0, weights), &[x.0]))
    }

    /// Records a scalar whose gradients with respect to `inputs` are already known.
    pub fn precomputed_scalar(&mut self, inputs: &[Var], value: T, grads: Vec<Tensor<T>>) -> Result<Var> {
        if inputs.len() != grads.len() {
            return Err(TensorError::InvalidShape {
                op: "precomputed_scalar",
                shape: vec![inputs.len(), grads.len()],
                msg: "one gradient per input required".into(),
            });
        }
        for (v, g) in inputs.iter().zip(&grads) {
            if self.value(*v).shape() != g.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "precomputed_scalar",
                    lhs: self.value(*v).shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        let ids: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        Ok(self.push(Tensor::scalar(value), Op::Precomputed(ids.clone(), grads), &ids))
    }

    /// Reverse pass from a scalar `loss`. Gradients land on every leaf that
    /// requires one; parameters the loss never reaches get zeros and are
    /// listed in the report.
    pub fn backward(&mut self, loss: Var) -> Result<BackwardReport> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::new(lv.shape(), vec![T::one()])?);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            let start = self.timings.as_ref().map(|_| Instant::now());
            for (j, gj) in self.input_grads(i, &g)? {
                if !self.nodes[j].requires_grad {
                    continue;
                }
                match grads[j].as_mut() {
                    Some(acc) => acc.data_mut().iter_mut().zip(gj.data()).for_each(|(a, &b)| *a = *a + b),
                    None => grads[j] = Some(gj),
                }
            }
            if let (Some(start), Some(t)) = (start, self.timings.as_mut()) {
                let e = t.per_op.entry("backward").or_default();
                e.0 += 1;
                e.1 += start.elapsed();
            }
        }
        let mut report = BackwardReport::default();
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if !(matches!(node.op, Op::Leaf) && node.requires_grad) {
                continue;
            }
            match grads[i].take() {
                Some(g) => node.value.set_grad(g.into_data())?,
                None => {
                    let n = node.value.numel();
                    node.value.set_grad(vec![T::zero(); n])?;
                    if node.param {
                        report.detached.push(Var(i));
                    }
                }
            }
        }
        if !report.detached.is_empty() {
            log::debug!("{} parameters detached from the loss", report.detached.len());
        }
        Ok(report)
    }

    fn input_grads(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(usize, Tensor<T>)>> {
        let v = |j: usize| &self.nodes[j].value;
        let needs = |j: usize| self.nodes[j].requires_grad;
        Ok(match &self.nodes[i].op {
            Op::Leaf => vec![],
            Op::Conv {
                input,
                weight,
                bias,
                params,
            } => {
                let (dx, dw, db) = kernels::conv2d_backward(v(*input), v(*weight), g, *params, needs(*input))?;
                let mut out = vec![(*weight, dw)];
                if let Some(dx) = dx {
                    out.push((*input, dx));
                }
                if let Some(b) = bias {
                    out.push((*b, db));
                }
                out
            }
            Op::Relu(x) => vec![(*x, kernels::relu_backward(v(*x), g))],
            Op::MaxPool { input, argmax } => {
                vec![(*input, kernels::maxpool2d_backward(v(*input).shape(), argmax, g))]
            }
            Op::Concat(a, b) => {
                let ca = v(*a).shape()[1];
                let (ga, gb) = kernels::channel_split(g, ca)?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Fold(x) => vec![(*x, kernels::unfold_stacked(g)?)],
            Op::PriorRows(x) => vec![(*x, kernels::from_prior_rows(g, v(*x).shape())?)],
            Op::CatRows(parts) => {
                let rows: Vec<usize> = parts.iter().map(|&p| v(p).shape()[1]).collect();
                parts.iter().copied().zip(kernels::split_rows(g, &rows)?).collect()
            }
            Op::Sum(x) => vec![(*x, Tensor::full(v(*x).shape(), g.item()))],
            Op::Dot(x, w) => {
                let s = g.item();
                vec![(*x, Tensor::new(v(*x).shape(), w.iter().map(|&w| w * s).collect())?)]
            }
            Op::Precomputed(ins, gs) => {
                let s = g.item();
                ins.iter()
                    .zip(gs)
                    .map(|(&j, gj)| {
                        let data = gj.data().iter().map(|&d| d * s).collect();
                        Tensor::new(gj.shape(), data).map(|t| (j, t))
                    })
                    .collect::<Result<_>>()?
            }
        })
    }

    /// Name of the operator that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }
}

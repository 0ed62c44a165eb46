//! Tape-based reverse-mode differentiation.
//!
//! Every backward rule is written in terms of graph ops, so gradients can
//! themselves be recorded (`create_graph = true`) and differentiated again.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::kernels::{self, ResamplePlan, SpatialPlan};
use crate::{Scalar, Tensor};

#[derive(Clone)]
enum Op<S> {
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, S),
    AddScalar(usize),
    MulConst(usize, Rc<Tensor<S>>),
    Conv {
        x: usize,
        w: usize,
        stride: usize,
        pad: usize,
    },
    ConvGradInput {
        g: usize,
        w: usize,
        stride: usize,
        pad: usize,
    },
    ConvGradWeight {
        x: usize,
        g: usize,
        stride: usize,
        pad: usize,
    },
    AddBias(usize, usize),
    SumToChannels(usize),
    BroadcastChannels(usize),
    Gather(usize, Rc<Vec<u32>>),
    Scatter(usize, Rc<Vec<u32>>),
    Resample(usize, Rc<ResamplePlan<S>>, bool),
    Spatial(usize, Rc<SpatialPlan<S>>, bool),
    Concat(Vec<usize>),
    SliceChannels(usize, usize),
    PadChannels(usize, usize),
    Reshape(usize),
    MatMul(usize, usize, bool, bool),
    Sum(usize),
    Expand(usize),
    SumPerSample(usize),
    ExpandPerSample(usize),
    Sqrt(usize),
    Recip(usize),
}

impl<S> Op<S> {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) => vec![*a, *b],
            Op::MatMul(a, b, _, _) => vec![*a, *b],
            Op::Conv { x, w, .. } => vec![*x, *w],
            Op::ConvGradInput { g, w, .. } => vec![*g, *w],
            Op::ConvGradWeight { x, g, .. } => vec![*x, *g],
            Op::Concat(parts) => parts.clone(),
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::MulConst(a, _)
            | Op::SumToChannels(a)
            | Op::BroadcastChannels(a)
            | Op::Gather(a, _)
            | Op::Scatter(a, _)
            | Op::Resample(a, _, _)
            | Op::Spatial(a, _, _)
            | Op::SliceChannels(a, _)
            | Op::PadChannels(a, _)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Expand(a)
            | Op::SumPerSample(a)
            | Op::ExpandPerSample(a)
            | Op::Sqrt(a)
            | Op::Recip(a) => vec![*a],
        }
    }
}

struct Node<S> {
    value: Rc<Tensor<S>>,
    op: Option<Op<S>>,
    requires_grad: bool,
}

/// Records operations on [`Var`]s for later differentiation.
pub struct Tape<S> {
    nodes: RefCell<Vec<Node<S>>>,
    recording: Cell<bool>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: Cell::new(true),
        }
    }

    /// A tape that never records: every op just evaluates.
    pub fn inference() -> Self {
        let t = Self::new();
        t.recording.set(false);
        t
    }

    pub fn is_recording(&self) -> bool {
        self.recording.get()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push_node(Rc::new(value), None, self.recording.get())
    }

    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push_node(Rc::new(value), None, false)
    }

    pub fn constant_rc(&self, value: Rc<Tensor<S>>) -> Var<'_, S> {
        self.push_node(value, None, false)
    }

    fn push_node(&self, value: Rc<Tensor<S>>, op: Option<Op<S>>, requires_grad: bool) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push_op(&self, value: Tensor<S>, op: Op<S>) -> Var<'_, S> {
        let requires_grad = self.recording.get() && {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        let op = if requires_grad { Some(op) } else { None };
        self.push_node(Rc::new(value), op, requires_grad)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<S>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn var(&self, id: usize) -> Var<'_, S> {
        Var { tape: self, id }
    }

    /// Gradients of `y` (seeded with ones) with respect to each of `wrt`.
    ///
    /// With `create_graph` the returned gradients are themselves recorded and
    /// can be differentiated again.
    pub fn grad<'t>(&'t self, y: Var<'t, S>, wrt: &[Var<'t, S>], create_graph: bool) -> Vec<Var<'t, S>> {
        let end = y.id + 1;
        let mut leads = vec![false; end];
        let mut is_target = vec![false; end];
        for v in wrt {
            if v.id < end {
                is_target[v.id] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for id in 0..end {
                let node = &nodes[id];
                leads[id] = node.requires_grad
                    && (is_target[id]
                        || node
                            .op
                            .as_ref()
                            .is_some_and(|op| op.inputs().iter().any(|&i| leads[i])));
            }
        }

        let saved = self.recording.replace(create_graph);
        let mut grads: Vec<Option<Var<'t, S>>> = vec![None; end];
        if leads[y.id] {
            grads[y.id] = Some(self.constant(Tensor::full(y.shape(), S::one())));
        }
        for id in (0..end).rev() {
            let Some(g) = grads[id] else { continue };
            if !leads[id] {
                continue;
            }
            let op = self.nodes.borrow()[id].op.clone();
            let Some(op) = op else { continue };
            for (input, gi) in self.backward_rule(id, &op, g, &leads) {
                grads[input] = Some(match grads[input] {
                    Some(prev) => prev + gi,
                    None => gi,
                });
            }
        }
        self.recording.set(saved);

        wrt.iter()
            .map(|v| {
                grads
                    .get(v.id)
                    .copied()
                    .flatten()
                    .unwrap_or_else(|| self.constant(Tensor::zeros(v.shape())))
            })
            .collect()
    }

    /// First-order gradients as plain tensors.
    pub fn grad_values<'t>(&'t self, y: Var<'t, S>, wrt: &[Var<'t, S>]) -> Vec<Tensor<S>> {
        self.grad(y, wrt, false)
            .into_iter()
            .map(|g| (*g.value()).clone())
            .collect()
    }

    fn backward_rule<'t>(
        &'t self,
        id: usize,
        op: &Op<S>,
        g: Var<'t, S>,
        leads: &[bool],
    ) -> Vec<(usize, Var<'t, S>)> {
        let need = |i: usize| leads[i];
        let v = |i: usize| self.var(i);
        let mut out = Vec::new();
        let mut emit = |i: usize, f: &dyn Fn() -> Var<'t, S>| {
            if need(i) {
                out.push((i, f()));
            }
        };
        match op {
            Op::Add(a, b) => {
                emit(*a, &|| g);
                emit(*b, &|| g);
            }
            Op::Sub(a, b) => {
                emit(*a, &|| g);
                emit(*b, &|| g.scale(-S::one()));
            }
            Op::Mul(a, b) => {
                emit(*a, &|| g * v(*b));
                emit(*b, &|| g * v(*a));
            }
            Op::Scale(a, s) => emit(*a, &|| g.scale(*s)),
            Op::AddScalar(a) => emit(*a, &|| g),
            Op::MulConst(a, c) => emit(*a, &|| g.mul_const(c.clone())),
            Op::Conv { x, w, stride, pad } => {
                let xs = v(*x).shape();
                emit(*x, &|| g.conv2d_grad_input(v(*w), *stride, *pad, (xs[2], xs[3])));
                emit(*w, &|| v(*x).conv2d_grad_weight(g, *stride, *pad, v(*w).shape()[2]));
            }
            Op::ConvGradInput { g: go, w, stride, pad } => {
                // y = Aᵀ(w) go; <h, y> = <conv(h, w), go>
                emit(*go, &|| g.conv2d(v(*w), *stride, *pad));
                emit(*w, &|| g.conv2d_grad_weight(v(*go), *stride, *pad, v(*w).shape()[2]));
            }
            Op::ConvGradWeight { x, g: go, stride, pad } => {
                // <h, y> = <conv(x, h), go>
                let xs = v(*x).shape();
                emit(*x, &|| v(*go).conv2d_grad_input(g, *stride, *pad, (xs[2], xs[3])));
                emit(*go, &|| v(*x).conv2d(g, *stride, *pad));
            }
            Op::AddBias(x, b) => {
                emit(*x, &|| g);
                emit(*b, &|| g.sum_to_channels());
            }
            Op::SumToChannels(a) => emit(*a, &|| g.broadcast_channels(v(*a).shape())),
            Op::BroadcastChannels(a) => emit(*a, &|| g.sum_to_channels()),
            Op::Gather(a, idx) => emit(*a, &|| g.scatter(idx.clone(), v(*a).shape())),
            Op::Scatter(a, idx) => emit(*a, &|| g.gather(idx.clone(), v(*a).shape())),
            Op::Resample(a, plan, adj) => emit(*a, &|| g.resample_with(plan.clone(), !adj)),
            Op::Spatial(a, plan, adj) => emit(*a, &|| g.spatial_with(plan.clone(), !adj)),
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let c = v(p).shape()[1];
                    emit(p, &|| g.slice_channels(start, c));
                    start += c;
                }
            }
            Op::SliceChannels(a, start) => {
                let total = v(*a).shape()[1];
                emit(*a, &|| g.pad_channels(*start, total));
            }
            Op::PadChannels(a, start) => {
                let c = v(*a).shape()[1];
                emit(*a, &|| g.slice_channels(*start, c));
            }
            Op::Reshape(a) => emit(*a, &|| g.reshape(v(*a).shape())),
            Op::MatMul(a, b, ta, tb) => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                let sa = v(a).shape();
                let sb = v(b).shape();
                emit(a, &|| {
                    let r = if !ta {
                        g.matmul(v(b), false, !tb)
                    } else {
                        v(b).matmul(g, tb, true)
                    };
                    r.reshape(sa)
                });
                emit(b, &|| {
                    let r = if !tb {
                        v(a).matmul(g, !ta, false)
                    } else {
                        g.matmul(v(a), true, ta)
                    };
                    r.reshape(sb)
                });
            }
            Op::Sum(a) => emit(*a, &|| g.expand(v(*a).shape())),
            Op::Expand(a) => emit(*a, &|| g.sum()),
            Op::SumPerSample(a) => emit(*a, &|| g.expand_per_sample(v(*a).shape())),
            Op::ExpandPerSample(a) => emit(*a, &|| g.sum_per_sample()),
            Op::Sqrt(a) => emit(*a, &|| g * v(id).recip().scale(S::lit(0.5))),
            Op::Recip(a) => {
                let y = v(id);
                emit(*a, &|| (g * (y * y)).scale(-S::one()))
            }
        }
        out
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, S> {
    tape: &'t Tape<S>,
    id: usize,
}

impl<S: Scalar> fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{} {:?})", self.id, self.shape())
    }
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<S>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> [usize; 4] {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Value of a scalar var.
    pub fn item(&self) -> S {
        self.value().item()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t, S> {
        self.tape.constant_rc(self.value())
    }

    fn unary(&self, value: Tensor<S>, op: Op<S>) -> Var<'t, S> {
        self.tape.push_op(value, op)
    }

    pub fn scale(self, s: S) -> Var<'t, S> {
        self.unary(self.value().map(|x| x * s), Op::Scale(self.id, s))
    }

    pub fn add_scalar(self, s: S) -> Var<'t, S> {
        self.unary(self.value().map(|x| x + s), Op::AddScalar(self.id))
    }

    /// Multiplies by a constant that broadcasts along size-1 axes.
    pub fn mul_const(self, c: Rc<Tensor<S>>) -> Var<'t, S> {
        let v = kernels::mul_broadcast(&self.value(), &c);
        self.unary(v, Op::MulConst(self.id, c))
    }

    pub fn relu(self) -> Var<'t, S> {
        self.leaky_relu(S::zero())
    }

    pub fn leaky_relu(self, slope: S) -> Var<'t, S> {
        let mask = self
            .value()
            .map(|x| if x > S::zero() { S::one() } else { slope });
        self.mul_const(Rc::new(mask))
    }

    pub fn abs(self) -> Var<'t, S> {
        let sign = self.value().map(|x| {
            if x > S::zero() {
                S::one()
            } else if x < S::zero() {
                -S::one()
            } else {
                S::zero()
            }
        });
        self.mul_const(Rc::new(sign))
    }

    pub fn square(self) -> Var<'t, S> {
        self * self
    }

    pub fn conv2d(self, w: Var<'t, S>, stride: usize, pad: usize) -> Var<'t, S> {
        let v = kernels::conv2d(&self.value(), &w.value(), stride, pad);
        self.unary(
            v,
            Op::Conv {
                x: self.id,
                w: w.id,
                stride,
                pad,
            },
        )
    }

    /// Adjoint of `conv2d` in its input; `self` is the output-shaped gradient.
    pub fn conv2d_grad_input(self, w: Var<'t, S>, stride: usize, pad: usize, in_hw: (usize, usize)) -> Var<'t, S> {
        let v = kernels::conv2d_grad_input(&self.value(), &w.value(), stride, pad, in_hw);
        self.unary(
            v,
            Op::ConvGradInput {
                g: self.id,
                w: w.id,
                stride,
                pad,
            },
        )
    }

    /// Weight gradient of `<conv2d(self, w), g>`.
    pub fn conv2d_grad_weight(self, g: Var<'t, S>, stride: usize, pad: usize, k: usize) -> Var<'t, S> {
        let v = kernels::conv2d_grad_weight(&self.value(), &g.value(), stride, pad, k);
        self.unary(
            v,
            Op::ConvGradWeight {
                x: self.id,
                g: g.id,
                stride,
                pad,
            },
        )
    }

    /// Adds a `[1, C, 1, 1]` bias.
    pub fn add_bias(self, b: Var<'t, S>) -> Var<'t, S> {
        let v = kernels::add_bias(&self.value(), &b.value());
        self.unary(v, Op::AddBias(self.id, b.id))
    }

    pub fn sum_to_channels(self) -> Var<'t, S> {
        let v = kernels::sum_to_channels(&self.value());
        self.unary(v, Op::SumToChannels(self.id))
    }

    pub fn broadcast_channels(self, shape: [usize; 4]) -> Var<'t, S> {
        let v = kernels::broadcast_channels(&self.value(), shape);
        self.unary(v, Op::BroadcastChannels(self.id))
    }

    pub fn max_pool2(self) -> Var<'t, S> {
        let (v, idx) = kernels::max_pool2(&self.value());
        self.unary(v, Op::Gather(self.id, Rc::new(idx)))
    }

    fn gather(self, idx: Rc<Vec<u32>>, out_shape: [usize; 4]) -> Var<'t, S> {
        let v = kernels::gather(&self.value(), &idx, out_shape);
        self.unary(v, Op::Gather(self.id, idx))
    }

    fn scatter(self, idx: Rc<Vec<u32>>, in_shape: [usize; 4]) -> Var<'t, S> {
        let v = kernels::scatter(&self.value(), &idx, in_shape);
        self.unary(v, Op::Scatter(self.id, idx))
    }

    pub fn resample(self, plan: Rc<ResamplePlan<S>>) -> Var<'t, S> {
        self.resample_with(plan, false)
    }

    fn resample_with(self, plan: Rc<ResamplePlan<S>>, adjoint: bool) -> Var<'t, S> {
        let v = plan.apply(&self.value(), adjoint);
        self.unary(v, Op::Resample(self.id, plan, adjoint))
    }

    pub fn spatial_map(self, plan: Rc<SpatialPlan<S>>) -> Var<'t, S> {
        self.spatial_with(plan, false)
    }

    fn spatial_with(self, plan: Rc<SpatialPlan<S>>, adjoint: bool) -> Var<'t, S> {
        let v = plan.apply(&self.value(), adjoint);
        self.unary(v, Op::Spatial(self.id, plan, adjoint))
    }

    /// Channel-wise concatenation.
    pub fn concat(parts: &[Var<'t, S>]) -> Var<'t, S> {
        assert!(!parts.is_empty(), "concat of nothing");
        let tape = parts[0].tape;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<S>> = values.iter().map(|v| v.as_ref()).collect();
        let v = kernels::concat_channels(&refs);
        tape.push_op(v, Op::Concat(parts.iter().map(|p| p.id).collect()))
    }

    pub fn slice_channels(self, start: usize, len: usize) -> Var<'t, S> {
        let v = kernels::slice_channels(&self.value(), start, len);
        self.unary(v, Op::SliceChannels(self.id, start))
    }

    fn pad_channels(self, start: usize, total: usize) -> Var<'t, S> {
        let v = kernels::pad_channels(&self.value(), start, total);
        self.unary(v, Op::PadChannels(self.id, start))
    }

    pub fn reshape(self, shape: [usize; 4]) -> Var<'t, S> {
        if self.shape() == shape {
            return self;
        }
        let v = (*self.value()).clone().reshaped(shape);
        self.unary(v, Op::Reshape(self.id))
    }

    /// `op(self) · op(other)` on `[rows, cols, 1, 1]` matrices.
    pub fn matmul(self, other: Var<'t, S>, ta: bool, tb: bool) -> Var<'t, S> {
        let v = kernels::matmul(&self.value(), &other.value(), ta, tb);
        self.unary(v, Op::MatMul(self.id, other.id, ta, tb))
    }

    pub fn sum(self) -> Var<'t, S> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t, S> {
        let n = self.value().len();
        self.sum().scale(S::one() / S::lit(n as f64))
    }

    fn expand(self, shape: [usize; 4]) -> Var<'t, S> {
        let v = Tensor::full(shape, self.item());
        self.unary(v, Op::Expand(self.id))
    }

    /// Reduces `[N, C, H, W]` to `[N, 1, 1, 1]`.
    pub fn sum_per_sample(self) -> Var<'t, S> {
        let v = kernels::sum_per_sample(&self.value());
        self.unary(v, Op::SumPerSample(self.id))
    }

    pub fn expand_per_sample(self, shape: [usize; 4]) -> Var<'t, S> {
        let v = kernels::expand_per_sample(&self.value(), shape);
        self.unary(v, Op::ExpandPerSample(self.id))
    }

    pub fn sqrt(self) -> Var<'t, S> {
        self.unary(self.value().map(|x| x.sqrt()), Op::Sqrt(self.id))
    }

    pub fn recip(self) -> Var<'t, S> {
        self.unary(self.value().map(|x| x.recip()), Op::Recip(self.id))
    }
}

impl<'t, S: Scalar> std::ops::Add for Var<'t, S> {
    type Output = Var<'t, S>;
    fn add(self, rhs: Self) -> Self::Output {
        let v = self.value().zip_map(&rhs.value(), |a, b| a + b);
        self.unary(v, Op::Add(self.id, rhs.id))
    }
}

impl<'t, S: Scalar> std::ops::Sub for Var<'t, S> {
    type Output = Var<'t, S>;
    fn sub(self, rhs: Self) -> Self::Output {
        let v = self.value().zip_map(&rhs.value(), |a, b| a - b);
        self.unary(v, Op::Sub(self.id, rhs.id))
    }
}

impl<'t, S: Scalar> std::ops::Mul for Var<'t, S> {
    type Output = Var<'t, S>;
    fn mul(self, rhs: Self) -> Self::Output {
        let v = self.value().zip_map(&rhs.value(), |a, b| a * b);
        self.unary(v, Op::Mul(self.id, rhs.id))
    }
}

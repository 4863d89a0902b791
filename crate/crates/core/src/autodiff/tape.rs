use super::conv;
use super::norm;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SumSpatial(Var),
    SumBatch(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    SoftmaxChannels(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: conv::ConvGeometry,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalMaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample2(Var),
    ConcatChannels(Var, Var),
    SliceChannels {
        input: Var,
        start: usize,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        saved: norm::BnSaved,
    },
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | ConcatChannels(a, b) => vec![*a, *b],
            Scale(a, _)
            | AddScalar(a)
            | Log(a)
            | Clamp(a, _, _)
            | Sum(a)
            | Mean(a)
            | SumSpatial(a)
            | SumBatch(a)
            | Relu(a)
            | LeakyRelu(a, _)
            | Sigmoid(a)
            | SoftmaxChannels(a)
            | Upsample2(a) => vec![*a],
            MaxPool2 { input, .. } | GlobalMaxPool { input, .. } | SliceChannels { input, .. } => {
                vec![*input]
            }
            Conv2d {
                input,
                kernel,
                bias,
                ..
            } => vec![*input, *kernel, *bias],
            Dense {
                input,
                weight,
                bias,
            } => vec![*input, *weight, *bias],
            BatchNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
        }
    }
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Record of executed operations supporting a reverse-mode sweep.
///
/// Nodes are appended in execution order, so every consumer has a larger
/// index than its producers and a descending sweep is a valid reverse
/// topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Copies `v` into a new constant leaf, cutting the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient of a leaf, or zeros when no gradient flowed into it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        match &self.nodes[v.0].grad {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[v.0].value.shape().to_vec()),
        }
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Inputs of the operation that produced `v`.
    pub fn inputs_of(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    /// Propagates d(loss)/d(leaf) into every trainable leaf, accumulating
    /// onto gradients left by earlier calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.backward_traced(loss).map(|_| ())
    }

    /// As [`Tape::backward`], returning the nodes in the order they were
    /// processed.
    pub fn backward_traced(&mut self, loss: Var) -> Result<Vec<Var>> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut order = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            order.push(Var(i));
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => {
                        for (a, d) in acc.data_mut().iter_mut().zip(&g) {
                            *a += d;
                        }
                    }
                    None => {
                        node.grad = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                    }
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(order)
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let val = |v: Var| nodes[v.0].value.data();
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        // Hands over a finished gradient, moving it into an empty slot.
        let give = |grads: &mut [Option<Vec<f64>>], v: Var, d: Vec<f64>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(slot) => add_into(slot, &d),
                empty => *empty = Some(d),
            }
        };

        match &nodes[i].op {
            Op::Leaf => unreachable!(),
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| {
                    for (s, d) in s.iter_mut().zip(g) {
                        *s -= d;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for ((s, d), y) in s.iter_mut().zip(g).zip(bv) {
                        *s += d * y;
                    }
                });
                acc(*b, &mut |s| {
                    for ((s, d), x) in s.iter_mut().zip(g).zip(av) {
                        *s += d * x;
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for ((s, d), y) in s.iter_mut().zip(g).zip(bv) {
                        *s += d / y;
                    }
                });
                acc(*b, &mut |s| {
                    for (((s, d), x), y) in s.iter_mut().zip(g).zip(av).zip(bv) {
                        *s -= d * x / (y * y);
                    }
                });
            }
            Op::Scale(a, f) => acc(*a, &mut |s| {
                for (s, d) in s.iter_mut().zip(g) {
                    *s += d * f;
                }
            }),
            Op::AddScalar(a) => acc(*a, &mut |s| add_into(s, g)),
            Op::Log(a) => {
                let av = val(*a);
                acc(*a, &mut |s| {
                    for ((s, d), x) in s.iter_mut().zip(g).zip(av) {
                        *s += d / x;
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let av = val(*a);
                acc(*a, &mut |s| {
                    for ((s, d), x) in s.iter_mut().zip(g).zip(av) {
                        if *x >= *lo && *x <= *hi {
                            *s += d;
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |s| {
                for s in s.iter_mut() {
                    *s += g[0];
                }
            }),
            Op::Mean(a) => {
                let n = nodes[a.0].value.len() as f64;
                acc(*a, &mut |s| {
                    for s in s.iter_mut() {
                        *s += g[0] / n;
                    }
                });
            }
            Op::SumSpatial(a) => {
                let (_, _, h, w) = nodes[a.0].value.dims4("sum_spatial").unwrap();
                let plane = h * w;
                acc(*a, &mut |s| {
                    for (chunk, d) in s.chunks_mut(plane).zip(g) {
                        for s in chunk {
                            *s += d;
                        }
                    }
                });
            }
            Op::SumBatch(a) => {
                let c = g.len().max(1);
                acc(*a, &mut |s| {
                    for row in s.chunks_mut(c) {
                        for (s, d) in row.iter_mut().zip(g) {
                            *s += d;
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let av = val(*a);
                acc(*a, &mut |s| {
                    for ((s, d), x) in s.iter_mut().zip(g).zip(av) {
                        if *x > 0.0 {
                            *s += d;
                        }
                    }
                });
            }
            Op::LeakyRelu(a, slope) => {
                let av = val(*a);
                acc(*a, &mut |s| {
                    for ((s, d), x) in s.iter_mut().zip(g).zip(av) {
                        *s += if *x > 0.0 { *d } else { d * slope };
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                acc(*a, &mut |s| {
                    for ((s, d), y) in s.iter_mut().zip(g).zip(y) {
                        *s += d * y * (1.0 - y);
                    }
                });
            }
            Op::SoftmaxChannels(a) => {
                let (n, c, h, w) = out.dims4("softmax").unwrap();
                let y = out.data();
                let plane = h * w;
                acc(*a, &mut |s| {
                    for b in 0..n {
                        let base = b * c * plane;
                        for p in 0..plane {
                            let dot: f64 = (0..c)
                                .map(|k| g[base + k * plane + p] * y[base + k * plane + p])
                                .sum();
                            for k in 0..c {
                                let idx = base + k * plane + p;
                                s[idx] += y[idx] * (g[idx] - dot);
                            }
                        }
                    }
                });
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let grads_in = conv::conv2d_backward(
                    geom,
                    val(*input),
                    val(*kernel),
                    g,
                    wants(*input),
                    wants(*kernel),
                );
                acc(*bias, &mut |s| {
                    let plane = geom.out_h * geom.out_w;
                    for b in 0..geom.batch {
                        for (co, s) in s.iter_mut().enumerate() {
                            let off = (b * geom.c_out + co) * plane;
                            *s += g[off..off + plane].iter().sum::<f64>();
                        }
                    }
                });
                if let Some(gi) = grads_in.input {
                    give(grads, *input, gi);
                }
                if let Some(gk) = grads_in.kernel {
                    give(grads, *kernel, gk);
                }
            }
            Op::MaxPool2 { input, argmax } | Op::GlobalMaxPool { input, argmax } => {
                acc(*input, &mut |s| {
                    for (&src, d) in argmax.iter().zip(g) {
                        s[src] += d;
                    }
                });
            }
            Op::Upsample2(a) => {
                let (n, c, h, w) = nodes[a.0].value.dims4("upsample2").unwrap();
                let (oh, ow) = (2 * h, 2 * w);
                acc(*a, &mut |s| {
                    for nc in 0..n * c {
                        for y in 0..oh {
                            for x in 0..ow {
                                s[nc * h * w + (y / 2) * w + x / 2] += g[nc * oh * ow + y * ow + x];
                            }
                        }
                    }
                });
            }
            Op::ConcatChannels(a, b) => {
                let (n, ca, h, w) = nodes[a.0].value.dims4("concat").unwrap();
                let cb = nodes[b.0].value.shape()[1];
                let plane = h * w;
                let ct = ca + cb;
                acc(*a, &mut |s| {
                    for bi in 0..n {
                        let src = &g[bi * ct * plane..][..ca * plane];
                        add_into(&mut s[bi * ca * plane..][..ca * plane], src);
                    }
                });
                acc(*b, &mut |s| {
                    for bi in 0..n {
                        let src = &g[(bi * ct + ca) * plane..][..cb * plane];
                        add_into(&mut s[bi * cb * plane..][..cb * plane], src);
                    }
                });
            }
            Op::SliceChannels { input, start } => {
                let (n, c_in, h, w) = nodes[input.0].value.dims4("slice_channels").unwrap();
                let c_out = out.shape()[1];
                let plane = h * w;
                acc(*input, &mut |s| {
                    for bi in 0..n {
                        let dst = &mut s[(bi * c_in + start) * plane..][..c_out * plane];
                        add_into(dst, &g[bi * c_out * plane..][..c_out * plane]);
                    }
                });
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let (n, f) = (nodes[input.0].value.shape()[0], nodes[input.0].value.shape()[1]);
                let o = nodes[weight.0].value.shape()[0];
                let (xv, wv) = (val(*input), val(*weight));
                // y[n,o] = x[n,f] w[o,f]^T + b[o]
                acc(*input, &mut |s| {
                    super::gemm::gemm(n, o, f, 1.0, g, (o, 1), wv, (f, 1), 1.0, s, (f, 1));
                });
                acc(*weight, &mut |s| {
                    super::gemm::gemm(o, n, f, 1.0, g, (1, o), xv, (f, 1), 1.0, s, (f, 1));
                });
                acc(*bias, &mut |s| {
                    for row in g.chunks(o) {
                        add_into(s, row);
                    }
                });
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                saved,
            } => {
                let shape = nodes[input.0].value.shape();
                let back = norm::batch_norm_backward(shape, saved, val(*gamma), g);
                give(grads, *input, back.input);
                give(grads, *gamma, back.gamma);
                give(grads, *beta, back.beta);
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

//! Reverse-mode differentiation over a recorded tape.
//!
//! Every call on [`Graph`] runs the forward kernel immediately, stores the
//! result in a new node and returns its [`Var`]. Nodes are appended in
//! execution order, so the tape is topologically sorted by construction.

use std::sync::Arc;

use super::ops::{self, IndexMap, NormStats, Padding};
use super::{Element, Shape, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Recorded operation. Carries every non-tensor argument so the node can be
/// replayed from its inputs.
#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    MatMul,
    BatchMatMul {
        ta: bool,
        tb: bool,
    },
    Conv2d {
        stride: usize,
        groups: usize,
        padding: Padding,
    },
    Softmax,
    LayerNorm {
        eps: f64,
    },
    Gelu,
    Upsample2x,
    Pad {
        h: usize,
        w: usize,
    },
    Crop {
        h: usize,
        w: usize,
    },
    Gather(Arc<IndexMap>),
    SliceChannels {
        start: usize,
        len: usize,
    },
    Concat,
    Add,
    Mul,
    Scale(f64),
    AddBias,
    Reshape(Shape),
    MeanSpatial,
    Sum,
    CrossEntropy(Arc<Vec<usize>>),
    /// Value computed outside the tape; has no adjoint.
    Opaque(String),
}

impl Op {
    pub fn name(&self) -> &str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::BatchMatMul { .. } => "batched_matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Softmax => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu => "gelu",
            Op::Upsample2x => "bilinear_upsample_x2",
            Op::Pad { .. } => "pad_spatial",
            Op::Crop { .. } => "crop_spatial",
            Op::Gather(_) => "gather",
            Op::SliceChannels { .. } => "slice_channels",
            Op::Concat => "concat_channels",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddBias => "add_bias",
            Op::Reshape(_) => "reshape",
            Op::MeanSpatial => "mean_spatial",
            Op::Sum => "sum",
            Op::CrossEntropy(_) => "cross_entropy",
            Op::Opaque(name) => name,
        }
    }
}

enum Saved<T> {
    Nothing,
    Norm(NormStats<T>),
    Probs(Tensor<T>),
}

struct Node<T> {
    op: Op,
    inputs: Vec<Var>,
    value: Tensor<T>,
    saved: Saved<T>,
    requires_grad: bool,
}

/// Single-writer tape; build one per forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn eval<T: Element>(op: &Op, xs: &[&Tensor<T>]) -> Result<(Tensor<T>, Saved<T>)> {
    let plain = |t: Tensor<T>| Ok((t, Saved::Nothing));
    match op {
        Op::Leaf | Op::Opaque(_) => unreachable!("leaves are not evaluated"),
        Op::MatMul => plain(ops::matmul(xs[0], xs[1])?),
        Op::BatchMatMul { ta, tb } => plain(ops::batched_matmul(xs[0], xs[1], *ta, *tb)?),
        Op::Conv2d { stride, groups, padding } => {
            plain(ops::conv2d(xs[0], xs[1], xs.get(2).copied(), *stride, *groups, *padding)?)
        }
        Op::Softmax => plain(ops::softmax(xs[0])),
        Op::LayerNorm { eps } => {
            let (y, stats) = ops::layer_norm_with_stats(xs[0], xs[1], xs[2], *eps)?;
            Ok((y, Saved::Norm(stats)))
        }
        Op::Gelu => plain(ops::gelu(xs[0])),
        Op::Upsample2x => plain(ops::bilinear_upsample_x2(xs[0])),
        Op::Pad { h, w } => plain(ops::pad_spatial(xs[0], *h, *w)?),
        Op::Crop { h, w } => plain(ops::crop_spatial(xs[0], *h, *w)?),
        Op::Gather(map) => plain(ops::gather(xs[0], map)?),
        Op::SliceChannels { start, len } => plain(ops::slice_channels(xs[0], *start, *len)?),
        Op::Concat => plain(ops::concat_channels(xs)?),
        Op::Add => plain(ops::add(xs[0], xs[1])?),
        Op::Mul => plain(ops::mul(xs[0], xs[1])?),
        Op::Scale(s) => plain(ops::scale(xs[0], *s)),
        Op::AddBias => plain(ops::add_bias(xs[0], xs[1])?),
        Op::Reshape(s) => plain(xs[0].reshape(*s)?),
        Op::MeanSpatial => plain(ops::mean_spatial(xs[0])),
        Op::Sum => plain(Tensor::scalar(xs[0].sum())),
        Op::CrossEntropy(labels) => {
            let (loss, probs) = ops::cross_entropy(xs[0], labels)?;
            Ok((Tensor::scalar(loss), Saved::Probs(probs)))
        }
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value: t,
            saved: Saved::Nothing,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives no gradient (data, labels, fixed buffers).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    /// Leaf whose gradient is returned by [`Graph::backward`].
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, true)
    }

    /// All recorded nodes in execution order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    pub fn inputs(&self, v: Var) -> &[Var] {
        &self.nodes[v.0].inputs
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>) -> Result<Var> {
        let (value, saved) = {
            let xs: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            eval(&op, &xs)?
        };
        value.ensure_finite(op.name())?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { op, inputs, value, saved, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul, vec![a, b])
    }

    pub fn batched_matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        self.push(Op::BatchMatMul { ta, tb }, vec![a, b])
    }

    /// `x · w + b` with `w` shaped `(1, 1, c_in, c_out)` and `b` `(1, 1, 1, c_out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        groups: usize,
        padding: Padding,
    ) -> Result<Var> {
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.push(Op::Conv2d { stride, groups, padding }, inputs)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Softmax, vec![x])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.push(Op::LayerNorm { eps }, vec![x, gamma, beta])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Gelu, vec![x])
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Upsample2x, vec![x])
    }

    pub fn pad(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        self.push(Op::Pad { h, w }, vec![x])
    }

    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        self.push(Op::Crop { h, w }, vec![x])
    }

    pub fn gather(&mut self, x: Var, map: Arc<IndexMap>) -> Result<Var> {
        self.push(Op::Gather(map), vec![x])
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.push(Op::SliceChannels { start, len }, vec![x])
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        self.push(Op::Concat, parts.to_vec())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add, vec![a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul, vec![a, b])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.push(Op::Scale(s), vec![x])
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        self.push(Op::AddBias, vec![x, b])
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Shape>) -> Result<Var> {
        let shape = shape.into();
        if shape == self.shape(x) {
            return Ok(x);
        }
        self.push(Op::Reshape(shape), vec![x])
    }

    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        self.push(Op::MeanSpatial, vec![x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sum, vec![x])
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.push(Op::CrossEntropy(Arc::new(labels.to_vec())), vec![logits])
    }

    /// Records a value computed outside the tape. Backward through it fails
    /// with [`Error::UnsupportedOp`].
    pub fn opaque(&mut self, name: &str, inputs: &[Var], value: Tensor<T>) -> Result<Var> {
        value.ensure_finite(name)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op: Op::Opaque(name.to_string()),
            inputs: inputs.to_vec(),
            value,
            saved: Saved::Nothing,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Every node's inputs precede it.
    pub fn is_topological(&self) -> bool {
        self.nodes.iter().enumerate().all(|(i, n)| n.inputs.iter().all(|v| v.0 < i))
    }

    /// Re-runs every non-leaf node from the recorded leaves and returns the
    /// recomputed values in node order. Opaque nodes keep their stored value.
    pub fn replay(&self) -> Result<Vec<Tensor<T>>> {
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf | Op::Opaque(_) => node.value.clone(),
                _ => {
                    let xs: Vec<&Tensor<T>> = node.inputs.iter().map(|v| &values[v.0]).collect();
                    eval(&node.op, &xs)?.0
                }
            };
            values.push(v);
        }
        Ok(values)
    }

    /// True when [`Graph::replay`] reproduces every recorded value bit for bit.
    pub fn replay_matches(&self) -> Result<bool> {
        let values = self.replay()?;
        Ok(values.iter().zip(&self.nodes).all(|(v, n)| {
            v.shape() == n.value.shape() && v.data().iter().zip(n.value.data()).all(|(a, b)| a.to_bits_eq(*b))
        }))
    }

    /// Reverse-mode pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return dim_err(format!("backward needs a scalar loss, got {}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let input_grads = self.adjoint(node, &g)?;
            for (v, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(ig.shape(), self.shape(*v), "adjoint of {}", node.op.name());
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(ig.data()) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn adjoint(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let x = |i: usize| &self.nodes[node.inputs[i].0].value;
        let wants = |i: usize| self.nodes[node.inputs[i].0].requires_grad;
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Opaque(name) => return Err(Error::UnsupportedOp(name.clone())),
            Op::MatMul => {
                let (a, b) = (x(0), x(1));
                let (m, k, p) = (a.shape().rows(), a.shape().c(), b.shape().c());
                let mut ga = vec![T::zero(); m * k];
                ops::gemm(g.data(), b.data(), &mut ga, m, p, k, false, true);
                let mut gb = vec![T::zero(); k * p];
                ops::gemm(a.data(), g.data(), &mut gb, k, m, p, true, false);
                vec![Some(Tensor::from_raw(a.shape(), ga)), Some(Tensor::from_raw(b.shape(), gb))]
            }
            Op::BatchMatMul { ta, tb } => {
                let (a, b) = (x(0), x(1));
                let (ga, gb) = match (ta, tb) {
                    (false, false) => (ops::bmm_raw(g, b, false, true)?, ops::bmm_raw(a, g, true, false)?),
                    (false, true) => (ops::bmm_raw(g, b, false, false)?, ops::bmm_raw(g, a, true, false)?),
                    (true, false) => (ops::bmm_raw(b, g, false, true)?, ops::bmm_raw(a, g, false, false)?),
                    (true, true) => (ops::bmm_raw(b, g, true, true)?, ops::bmm_raw(g, a, true, true)?),
                };
                vec![Some(ga), Some(gb)]
            }
            Op::Conv2d { stride, groups, padding } => {
                let (gx, gw, gb) = ops::conv2d_backward(x(0), x(1), g, *stride, *groups, *padding, wants(0))?;
                let mut out = vec![gx, Some(gw)];
                if node.inputs.len() == 3 {
                    out.push(Some(gb));
                }
                out
            }
            Op::Softmax => vec![Some(ops::softmax_backward(&node.value, g))],
            Op::LayerNorm { .. } => {
                let Saved::Norm(stats) = &node.saved else {
                    unreachable!("layer_norm node without statistics")
                };
                let (gx, gg, gb) = ops::layer_norm_backward(x(0), x(1), stats, g);
                vec![Some(gx), Some(gg), Some(gb)]
            }
            Op::Gelu => vec![Some(ops::gelu_backward(x(0), g))],
            Op::Upsample2x => vec![Some(ops::bilinear_upsample_x2_backward(x(0).shape(), g))],
            Op::Pad { .. } => {
                let s = x(0).shape();
                vec![Some(ops::crop_spatial(g, s.h(), s.w())?)]
            }
            Op::Crop { .. } => {
                let s = x(0).shape();
                vec![Some(ops::pad_spatial(g, s.h(), s.w())?)]
            }
            Op::Gather(map) => vec![Some(ops::scatter_add(g, map))],
            Op::SliceChannels { start, len } => {
                let s = x(0).shape();
                let c = s.c();
                let mut out = vec![T::zero(); s.numel()];
                for (orow, grow) in out.chunks_mut(c).zip(g.data().chunks(*len)) {
                    orow[*start..start + len].copy_from_slice(grow);
                }
                vec![Some(Tensor::from_raw(s, out))]
            }
            Op::Concat => {
                let mut start = 0;
                let mut out = Vec::with_capacity(node.inputs.len());
                for i in 0..node.inputs.len() {
                    let c = x(i).shape().c();
                    out.push(Some(ops::slice_channels(g, start, c)?));
                    start += c;
                }
                out
            }
            Op::Add => vec![Some(g.clone()), Some(g.clone())],
            Op::Mul => vec![Some(ops::mul(g, x(1))?), Some(ops::mul(g, x(0))?)],
            Op::Scale(s) => vec![Some(ops::scale(g, *s))],
            Op::AddBias => {
                let c = g.shape().c();
                let mut gb = vec![T::zero(); c];
                for row in g.data().chunks(c) {
                    for (a, &b) in gb.iter_mut().zip(row) {
                        *a += b;
                    }
                }
                vec![Some(g.clone()), Some(Tensor::from_raw(x(1).shape(), gb))]
            }
            Op::Reshape(_) => vec![Some(g.reshape(x(0).shape())?)],
            Op::MeanSpatial => {
                let s = x(0).shape();
                let [n, h, w, c] = s.0;
                let inv = T::from_f64(1.0 / (h * w) as f64);
                let data = (0..s.numel()).map(|i| g.data()[(i / (h * w * c)) * c + i % c] * inv).collect();
                debug_assert_eq!(g.numel(), n * c);
                vec![Some(Tensor::from_raw(s, data))]
            }
            Op::Sum => vec![Some(Tensor::full(x(0).shape(), g.item()))],
            Op::CrossEntropy(labels) => {
                let Saved::Probs(probs) = &node.saved else {
                    unreachable!("cross_entropy node without probabilities")
                };
                let k = probs.shape().c();
                let scale = g.item() / T::from_f64(labels.len() as f64);
                let mut out = probs.data().to_vec();
                for (row, &l) in out.chunks_mut(k).zip(labels.iter()) {
                    row[l] -= T::one();
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                vec![Some(Tensor::from_raw(probs.shape(), out))]
            }
        })
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of a `param` leaf. `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

trait BitsEq {
    fn to_bits_eq(self, other: Self) -> bool;
}

impl<T: Element> BitsEq for T {
    fn to_bits_eq(self, other: Self) -> bool {
        self.as_f64().to_bits() == other.as_f64().to_bits()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let mut rng = Rng::new(0);
        let x = g.param(Tensor::randn([1, 2, 3, 4], &mut rng));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn inputs_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::ones([1, 1, 1, 3]));
        let w = g.param(Tensor::ones([1, 1, 1, 3]));
        let y = g.mul(x, w).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).is_none());
        assert!(grads.get(w).is_some());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::ones([1, 1, 2, 2]));
        assert!(matches!(g.backward(x), Err(Error::Dimension(_))));
    }

    #[test]
    fn opaque_op_has_no_adjoint() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::ones([1, 1, 1, 2]));
        let y = g.opaque("argmax", &[x], Tensor::scalar(1.0)).unwrap();
        let s = g.sum(y).unwrap();
        match g.backward(s) {
            Err(Error::UnsupportedOp(name)) => assert_eq!(name, "argmax"),
            other => panic!("expected unsupported-op error, got {:?}", other.err()),
        }
    }

    #[test]
    fn non_finite_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_vec([1, 1, 1, 1], vec![f64::MAX]).unwrap());
        let err = g.scale(x, 10.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn replay_is_bit_exact() {
        let mut g = Graph::<f32>::new();
        let mut rng = Rng::new(9);
        let x = g.input(Tensor::randn([1, 3, 3, 4], &mut rng));
        let w = g.param(Tensor::randn([1, 1, 4, 4], &mut rng));
        let y = g.matmul(x, w).unwrap();
        let y = g.softmax(y).unwrap();
        let _ = g.gelu(y).unwrap();
        assert!(g.is_topological());
        assert!(g.replay_matches().unwrap());
    }
}

//! The operation tape: a topologically ordered record of executed ops, each
//! carrying enough to run its local backward rule.

use super::{strides_of, Scalar, Tensor};
use crate::error::{Error, Result};
use std::sync::Arc;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Silu,
    Sigmoid,
    Softplus,
    Exp,
    Relu,
    /// Smooth-L1 cell applied to an elementwise difference.
    Huber,
    /// Deliberately wrong SiLU derivative; the gradient checker's negative
    /// control. Never reachable from model code.
    SiluBrokenGrad,
}

pub(crate) enum NodeKind<T: Scalar> {
    Leaf,
    Unary(UnaryKind),
    AddScalar,
    MulScalar(T),
    Add,
    Sub,
    Mul,
    /// x[..., C] + bias[C]
    AddBiasLast,
    /// [m,k] x [k,n]
    Matmul,
    /// [B,m,k] x [B,k,n]
    Bmm,
    Reshape,
    /// Bijective index map: out[i] = in[index[i]].
    Gather { index: Arc<Vec<u32>> },
    Concat { axis: usize },
    Slice { starts: Vec<usize>, lens: Vec<usize> },
    /// Zero padding on the trailing two axes.
    Pad2d { top: usize, bottom: usize, left: usize, right: usize },
    Conv2d { stride: usize, padding: usize },
    DwConv2d { padding: usize },
    AvgPool2,
    UpsampleNearest2,
    UpsampleBilinear2,
    /// Stashes per-row mean and inverse stddev from the forward pass.
    LayerNormLast { eps: T, mean: Vec<T>, inv_std: Vec<T> },
    SoftmaxLast,
    SumAll,
    /// Input-dependent SSM recurrence; stashes the state history and the
    /// per-step decay so backward avoids recomputing exponentials.
    SelectiveScan { state: usize, stash_h: Vec<T>, stash_abar: Vec<T> },
}

pub(crate) struct Node<T: Scalar> {
    pub value: Tensor<T>,
    pub parents: Vec<Var>,
    pub kind: NodeKind<T>,
    pub requires_grad: bool,
}

/// Wengert-list reverse-mode differentiation over [`Tensor`] values.
///
/// The graph is built and traversed by one logical thread. Inference graphs
/// (`Graph::inference`) skip gradient bookkeeping and backward stashes.
pub struct Graph<T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
    pub(crate) grad_enabled: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grad_enabled: true }
    }

    /// Forward-only graph: no gradients are tracked or stashed.
    pub fn inference() -> Self {
        Graph { nodes: Vec::new(), grad_enabled: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf value. Its `requires_grad` flag decides whether
    /// `backward` will populate its gradient.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad && self.grad_enabled;
        self.nodes.push(Node { value: t, parents: vec![], kind: NodeKind::Leaf, requires_grad: rg });
        Var(self.nodes.len() - 1)
    }

    /// Insert a non-differentiable constant.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn data(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value.data
    }

    /// Gradient of a leaf after `backward`; `None` if not populated.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, parents: Vec<Var>, kind: NodeKind<T>) -> Var {
        let rg = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, parents, kind, requires_grad: rg });
        Var(self.nodes.len() - 1)
    }

    // ── elementwise and scalar ops ──────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape_binary(a, b, NodeKind::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape_binary(a, b, NodeKind::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape_binary(a, b, NodeKind::Mul, |x, y| x * y)
    }

    fn same_shape_binary(
        &mut self,
        a: Var,
        b: Var,
        kind: NodeKind<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape != tb.shape {
            return Err(Error::shape(format!(
                "elementwise op on {:?} vs {:?}",
                ta.shape, tb.shape
            )));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape.clone();
        Ok(self.push(Tensor { shape, data, requires_grad: false, grad: None }, vec![a, b], kind))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let t = &self.nodes[a.0].value;
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&x| x + c).collect(),
            requires_grad: false,
            grad: None,
        };
        self.push(out, vec![a], NodeKind::AddScalar)
    }

    pub fn mul_scalar(&mut self, a: Var, c: T) -> Var {
        let t = &self.nodes[a.0].value;
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&x| x * c).collect(),
            requires_grad: false,
            grad: None,
        };
        self.push(out, vec![a], NodeKind::MulScalar(c))
    }

    pub fn unary(&mut self, a: Var, kind: UnaryKind) -> Var {
        let t = &self.nodes[a.0].value;
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&x| unary_forward(kind, x)).collect(),
            requires_grad: false,
            grad: None,
        };
        self.push(out, vec![a], NodeKind::Unary(kind))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, UnaryKind::Silu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, UnaryKind::Sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, UnaryKind::Softplus)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, UnaryKind::Exp)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, UnaryKind::Relu)
    }

    pub fn huber(&mut self, a: Var) -> Var {
        self.unary(a, UnaryKind::Huber)
    }

    pub(crate) fn silu_broken_grad(&mut self, a: Var) -> Var {
        self.unary(a, UnaryKind::SiluBrokenGrad)
    }

    /// `x[..., C] + bias[C]`, the only broadcast besides scalar ops.
    pub fn add_bias_last(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        let c = *tx.shape.last().ok_or_else(|| Error::shape("bias add on rank-0".into()))?;
        if tb.shape != [c] {
            return Err(Error::shape(format!(
                "bias shape {:?} vs last axis {c}",
                tb.shape
            )));
        }
        let mut data = Vec::with_capacity(tx.numel());
        for row in tx.data.chunks_exact(c) {
            for (j, &v) in row.iter().enumerate() {
                data.push(v + tb.data[j]);
            }
        }
        let shape = tx.shape.clone();
        Ok(self.push(
            Tensor { shape, data, requires_grad: false, grad: None },
            vec![x, bias],
            NodeKind::AddBiasLast,
        ))
    }

    /// Sum of every element, producing a `[1]` tensor.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let mut acc = T::ZERO;
        for &v in &self.nodes[a.0].value.data {
            acc += v;
        }
        self.push(Tensor::scalar(acc), vec![a], NodeKind::SumAll)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.numel();
        let s = self.sum_all(a);
        self.mul_scalar(s, T::from_f64(1.0 / n as f64))
    }

    /// Row-major reinterpretation; element order is untouched, so
    /// reshape-of-reshape back to the original shape is the identity.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let numel: usize = shape.iter().product();
        if numel != t.numel() {
            return Err(Error::shape(format!(
                "reshape {:?} -> {:?} changes element count",
                t.shape, shape
            )));
        }
        let out = Tensor {
            shape: shape.to_vec(),
            data: t.data.clone(),
            requires_grad: false,
            grad: None,
        };
        Ok(self.push(out, vec![a], NodeKind::Reshape))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates `grad` on every
    /// `requires_grad` leaf reachable from `loss`; accumulation across
    /// fan-out is additive.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::config(
                "loss is detached: no requires_grad leaf reaches it".into(),
            ));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[loss.0] = Some(vec![T::ONE]);

        for i in (0..n).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            match self.nodes[i].kind {
                NodeKind::Leaf => {
                    let node = &mut self.nodes[i];
                    match &mut node.value.grad {
                        Some(g) => {
                            for (dst, src) in g.iter_mut().zip(&gout) {
                                *dst += *src;
                            }
                        }
                        None => node.value.grad = Some(gout),
                    }
                }
                _ => self.backprop_node(i, &gout, &mut grads),
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let parent = |k: usize| node.parents[k].0;
        match &node.kind {
            NodeKind::Leaf => unreachable!("leaves handled by backward"),
            NodeKind::Unary(kind) => {
                let x = &self.nodes[parent(0)].value.data;
                let g = self.grad_buf(grads, parent(0));
                for ((dst, &xv), &gv) in g.iter_mut().zip(x.iter()).zip(gout) {
                    *dst += unary_backward(*kind, xv) * gv;
                }
            }
            NodeKind::AddScalar => {
                let g = self.grad_buf(grads, parent(0));
                for (dst, &gv) in g.iter_mut().zip(gout) {
                    *dst += gv;
                }
            }
            NodeKind::MulScalar(c) => {
                let c = *c;
                let g = self.grad_buf(grads, parent(0));
                for (dst, &gv) in g.iter_mut().zip(gout) {
                    *dst += gv * c;
                }
            }
            NodeKind::Add => {
                for k in 0..2 {
                    if self.nodes[parent(k)].requires_grad {
                        let g = self.grad_buf(grads, parent(k));
                        for (dst, &gv) in g.iter_mut().zip(gout) {
                            *dst += gv;
                        }
                    }
                }
            }
            NodeKind::Sub => {
                if self.nodes[parent(0)].requires_grad {
                    let g = self.grad_buf(grads, parent(0));
                    for (dst, &gv) in g.iter_mut().zip(gout) {
                        *dst += gv;
                    }
                }
                if self.nodes[parent(1)].requires_grad {
                    let g = self.grad_buf(grads, parent(1));
                    for (dst, &gv) in g.iter_mut().zip(gout) {
                        *dst -= gv;
                    }
                }
            }
            NodeKind::Mul => {
                if self.nodes[parent(0)].requires_grad {
                    let b = &self.nodes[parent(1)].value.data;
                    let g = self.grad_buf(grads, parent(0));
                    for ((dst, &bv), &gv) in g.iter_mut().zip(b.iter()).zip(gout) {
                        *dst += bv * gv;
                    }
                }
                if self.nodes[parent(1)].requires_grad {
                    let a = &self.nodes[parent(0)].value.data;
                    let g = self.grad_buf(grads, parent(1));
                    for ((dst, &av), &gv) in g.iter_mut().zip(a.iter()).zip(gout) {
                        *dst += av * gv;
                    }
                }
            }
            NodeKind::AddBiasLast => {
                let c = *self.nodes[parent(1)].value.shape.last().unwrap();
                if self.nodes[parent(0)].requires_grad {
                    let g = self.grad_buf(grads, parent(0));
                    for (dst, &gv) in g.iter_mut().zip(gout) {
                        *dst += gv;
                    }
                }
                if self.nodes[parent(1)].requires_grad {
                    let g = self.grad_buf(grads, parent(1));
                    for row in gout.chunks_exact(c) {
                        for (dst, &gv) in g.iter_mut().zip(row) {
                            *dst += gv;
                        }
                    }
                }
            }
            NodeKind::SumAll => {
                let g = self.grad_buf(grads, parent(0));
                let gv = gout[0];
                for dst in g.iter_mut() {
                    *dst += gv;
                }
            }
            NodeKind::Reshape => {
                let g = self.grad_buf(grads, parent(0));
                for (dst, &gv) in g.iter_mut().zip(gout) {
                    *dst += gv;
                }
            }
            NodeKind::Matmul => self.backward_matmul(i, gout, grads),
            NodeKind::Bmm => self.backward_bmm(i, gout, grads),
            NodeKind::Gather { index } => {
                let g = self.grad_buf(grads, parent(0));
                for (o, &src) in index.iter().enumerate() {
                    g[src as usize] += gout[o];
                }
            }
            NodeKind::Concat { axis } => self.backward_concat(i, *axis, gout, grads),
            NodeKind::Slice { starts, lens } => {
                self.backward_slice(i, starts, lens, gout, grads)
            }
            NodeKind::Pad2d { top, bottom: _, left, right } => {
                self.backward_pad2d(i, *top, *left, *right, gout, grads)
            }
            NodeKind::Conv2d { stride, padding } => {
                self.backward_conv2d(i, *stride, *padding, gout, grads)
            }
            NodeKind::DwConv2d { padding } => self.backward_dwconv2d(i, *padding, gout, grads),
            NodeKind::AvgPool2 => self.backward_avg_pool2(i, gout, grads),
            NodeKind::UpsampleNearest2 => self.backward_upsample_nearest2(i, gout, grads),
            NodeKind::UpsampleBilinear2 => self.backward_upsample_bilinear2(i, gout, grads),
            NodeKind::LayerNormLast { eps: _, mean, inv_std } => {
                self.backward_layer_norm(i, mean, inv_std, gout, grads)
            }
            NodeKind::SoftmaxLast => self.backward_softmax(i, gout, grads),
            NodeKind::SelectiveScan { state, stash_h, stash_abar } => {
                self.backward_selective_scan(i, *state, stash_h, stash_abar, gout, grads)
            }
        }
    }

    /// Zero-initialized gradient buffer for parent node `p`.
    pub(crate) fn grad_buf<'a>(
        &self,
        grads: &'a mut [Option<Vec<T>>],
        p: usize,
    ) -> &'a mut [T] {
        grads[p].get_or_insert_with(|| vec![T::ZERO; self.nodes[p].value.numel()])
    }

    /// Bit-identical forward determinism relies on this fixed accumulation
    /// order; exposed for tests.
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }
}

pub(crate) fn unary_forward<T: Scalar>(kind: UnaryKind, x: T) -> T {
    match kind {
        UnaryKind::Silu | UnaryKind::SiluBrokenGrad => x * sigmoid_scalar(x),
        UnaryKind::Sigmoid => sigmoid_scalar(x),
        UnaryKind::Softplus => softplus_scalar(x),
        UnaryKind::Exp => x.exp(),
        UnaryKind::Relu => {
            if x > T::ZERO {
                x
            } else {
                T::ZERO
            }
        }
        UnaryKind::Huber => {
            let a = x.abs();
            if a <= T::ONE {
                T::from_f64(0.5) * x * x
            } else {
                a - T::from_f64(0.5)
            }
        }
    }
}

pub(crate) fn unary_backward<T: Scalar>(kind: UnaryKind, x: T) -> T {
    match kind {
        UnaryKind::Silu => {
            let s = sigmoid_scalar(x);
            s * (T::ONE + x * (T::ONE - s))
        }
        UnaryKind::SiluBrokenGrad => {
            let s = sigmoid_scalar(x);
            s * (T::ONE + x * (T::ONE - s)) * T::from_f64(1.05) + T::from_f64(0.01)
        }
        UnaryKind::Sigmoid => {
            let s = sigmoid_scalar(x);
            s * (T::ONE - s)
        }
        UnaryKind::Softplus => sigmoid_scalar(x),
        UnaryKind::Exp => x.exp(),
        UnaryKind::Relu => {
            if x > T::ZERO {
                T::ONE
            } else {
                T::ZERO
            }
        }
        UnaryKind::Huber => {
            if x > T::ONE {
                T::ONE
            } else if x < -T::ONE {
                -T::ONE
            } else {
                x
            }
        }
    }
}

pub(crate) fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

fn softplus_scalar<T: Scalar>(x: T) -> T {
    x.maxv(T::ZERO) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn check_rank4<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize, usize, usize)> {
    if t.rank() != 4 {
        return Err(Error::shape(format!("{what} expects rank-4 input, got {:?}", t.shape)));
    }
    Ok((t.shape[0], t.shape[1], t.shape[2], t.shape[3]))
}

#[allow(unused)]
pub(crate) fn flat_index(shape: &[usize], idx: &[usize]) -> usize {
    let strides = strides_of(shape);
    idx.iter().zip(&strides).map(|(i, s)| i * s).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf_grad(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data).unwrap().with_requires_grad(true)
    }

    #[test]
    fn sum_of_squares_gradient_is_two_x() {
        let mut g = Graph::new();
        let x = g.leaf(leaf_grad(&[3], vec![1.0, -2.0, 0.5]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn residual_path_adds_identity_gradient() {
        // y = silu(x) + x; grad(x) = silu'(x) + 1
        let mut g = Graph::new();
        let x = g.leaf(leaf_grad(&[2], vec![0.3, -0.7]));
        let f = g.silu(x);
        let y = g.add(f, x).unwrap();
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        let got = g.grad(x).unwrap();
        for (i, &xv) in [0.3f64, -0.7].iter().enumerate() {
            let want = unary_backward(UnaryKind::Silu, xv) + 1.0;
            assert!((got[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(leaf_grad(&[2], vec![1.0, 2.0]));
        let y = g.silu(x);
        assert!(matches!(g.backward(y), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_rejects_detached_loss() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let y = g.sum_all(x);
        assert!(matches!(g.backward(y), Err(Error::Config(_))));
    }

    #[test]
    fn silu_values() {
        assert_eq!(unary_forward(UnaryKind::Silu, 0.0f64), 0.0);
        assert!((unary_forward(UnaryKind::Silu, 20.0f64) - 20.0).abs() < 1e-6);
        assert!((unary_forward(UnaryKind::Silu, 1.0f64) - 0.7310585786300049).abs() < 1e-12);
    }

    #[test]
    fn fanout_accumulates_additively() {
        // y = x + x => dy/dx = 2
        let mut g = Graph::new();
        let x = g.leaf(leaf_grad(&[1], vec![3.0]));
        let y = g.add(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let run = || {
            let mut g = Graph::<f32>::new();
            let x = g.leaf(Tensor::from_fn(&[64], |i| (i as f32 * 0.37).sin()));
            let y = g.silu(x);
            let s = g.sum_all(y);
            g.value(s).data[0].to_bits()
        };
        assert_eq!(run(), run());
    }
}

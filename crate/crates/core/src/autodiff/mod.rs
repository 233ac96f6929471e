//! Define-by-run reverse-mode differentiation over the layer vocabulary used
//! by the backbone and the buffer modules.
//!
//! A [`Graph`] is an append-only tape. Every builder method evaluates its op
//! eagerly and records what the backward pass needs. A node requires a
//! gradient iff one of its inputs does; leaves decide this directly. Frozen
//! leaves therefore never get gradient storage, while gradients still flow
//! through frozen layers to trainable leaves upstream of them.

pub mod conv;
pub mod norm;
pub mod ops;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
pub use norm::{ChannelStats, DEFAULT_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv2d { stride: usize, padding: usize },
    BatchNorm(norm::BatchNormSaved),
    GroupNorm(norm::GroupNormSaved),
    Relu,
    AvgPool { k: usize },
    GlobalAvgPool,
    Linear,
    Add,
    ScaleBy,
    Softmax,
    SoftmaxEntropy { probs: Tensor },
    CrossEntropy { probs: Tensor, labels: Vec<usize> },
    WeightedSum { weights: Vec<f64>, denom: f64 },
    Sum,
    QuadraticPenalty { weights: Tensor, anchor: Tensor },
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients of the trainable leaves, keyed by leaf id.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: IndexMap<NodeId, Tensor>,
    names: IndexMap<NodeId, String>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    /// Gradients of named leaves, in leaf creation order.
    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .filter_map(|(id, name)| self.grads.get(id).map(|g| (name.as_str(), g)))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .find(|(_, n)| n.as_str() == name)
            .and_then(|(id, _)| self.grads.get(id))
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(Tensor::is_finite)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    names: IndexMap<NodeId, String>,
    visits: usize,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nodes visited by the most recent backward pass.
    pub fn backward_visits(&self) -> usize {
        self.visits
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        id
    }

    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            requires_grad: trainable,
        });
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    /// A leaf whose gradient can be looked up by `name`.
    pub fn named_leaf(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> NodeId {
        let id = self.leaf(value, trainable);
        self.names.insert(id, name.into());
        id
    }

    /// Leaf created by `named_leaf` under `name` (the latest one if reused).
    pub fn find_named(&self, name: &str) -> Option<NodeId> {
        self.names.iter().rev().find(|(_, n)| n.as_str() == name).map(|(id, _)| *id)
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let out = conv::conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(Op::Conv2d { stride, padding }, inputs, out))
    }

    /// Batch normalization with `fixed` statistics, or batch statistics when
    /// `fixed` is `None`. Also returns the batch statistics when computed.
    pub fn batch_norm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        fixed: Option<&ChannelStats>,
        eps: f64,
    ) -> Result<(NodeId, Option<ChannelStats>)> {
        let (out, saved, stats) = norm::batch_norm(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            fixed,
            eps,
        )?;
        Ok((
            self.push(Op::BatchNorm(saved), vec![input, gamma, beta], out),
            stats,
        ))
    }

    pub fn group_norm(
        &mut self,
        input: NodeId,
        groups: usize,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let (out, saved) = norm::group_norm(
            self.value(input),
            groups,
            self.value(gamma),
            self.value(beta),
            eps,
        )?;
        Ok(self.push(Op::GroupNorm(saved), vec![input, gamma, beta], out))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let out = ops::relu(self.value(input));
        self.push(Op::Relu, vec![input], out)
    }

    pub fn avg_pool2d(&mut self, input: NodeId, k: usize) -> Result<NodeId> {
        let out = ops::avg_pool2d(self.value(input), k)?;
        Ok(self.push(Op::AvgPool { k }, vec![input], out))
    }

    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let out = ops::global_avg_pool(self.value(input))?;
        Ok(self.push(Op::GlobalAvgPool, vec![input], out))
    }

    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let out = ops::linear(self.value(input), self.value(weight), self.value(bias))?;
        Ok(self.push(Op::Linear, vec![input, weight, bias], out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", x.shape(), y.shape()),
            ));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data).ensure_finite("add")?;
        Ok(self.push(Op::Add, vec![a, b], out))
    }

    /// `scale · input` for a one-element `scale` node.
    pub fn scale_by(&mut self, input: NodeId, scale: NodeId) -> Result<NodeId> {
        let s = self.value(scale);
        if !s.is_scalar() {
            return Err(Error::shape("scale_by", format!("scale has shape {:?}", s.shape())));
        }
        let s = s.item();
        let out = self.value(input).map(|v| s * v).ensure_finite("scale_by")?;
        Ok(self.push(Op::ScaleBy, vec![input, scale], out))
    }

    pub fn softmax(&mut self, logits: NodeId) -> Result<NodeId> {
        let out = ops::softmax(self.value(logits))?;
        Ok(self.push(Op::Softmax, vec![logits], out))
    }

    /// Per-row entropy of `softmax(logits)`, shape `[N]`.
    pub fn softmax_entropy(&mut self, logits: NodeId) -> Result<NodeId> {
        let (h, probs) = ops::softmax_entropy(self.value(logits))?;
        Ok(self.push(Op::SoftmaxEntropy { probs }, vec![logits], h))
    }

    /// Mean cross-entropy, a scalar node.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (loss, probs) = ops::cross_entropy(self.value(logits), labels)?;
        Ok(self.push(
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
            vec![logits],
            Tensor::scalar(loss),
        ))
    }

    /// `Σ_i w_i x_i / denom` with constant weights.
    pub fn weighted_sum(&mut self, input: NodeId, weights: Vec<f64>, denom: f64) -> Result<NodeId> {
        let x = self.value(input);
        if weights.len() != x.len() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{} weights for {} values", weights.len(), x.len()),
            ));
        }
        let v: f64 = x.data().iter().zip(&weights).map(|(a, w)| a * w).sum::<f64>() / denom;
        let out = Tensor::scalar(v).ensure_finite("weighted_sum")?;
        Ok(self.push(Op::WeightedSum { weights, denom }, vec![input], out))
    }

    pub fn mean(&mut self, input: NodeId) -> Result<NodeId> {
        let n = self.value(input).len();
        self.weighted_sum(input, vec![1.0; n], n as f64)
    }

    pub fn sum(&mut self, input: NodeId) -> Result<NodeId> {
        let out = Tensor::scalar(self.value(input).sum()).ensure_finite("sum")?;
        Ok(self.push(Op::Sum, vec![input], out))
    }

    /// `Σ_j w_j (x_j − anchor_j)²`.
    pub fn quadratic_penalty(
        &mut self,
        input: NodeId,
        weights: Tensor,
        anchor: Tensor,
    ) -> Result<NodeId> {
        let x = self.value(input);
        if weights.shape() != x.shape() || anchor.shape() != x.shape() {
            return Err(Error::shape("quadratic_penalty", "weights/anchor shape"));
        }
        let v: f64 = x
            .data()
            .iter()
            .zip(weights.data())
            .zip(anchor.data())
            .map(|((x, w), a)| w * (x - a) * (x - a))
            .sum();
        let out = Tensor::scalar(v).ensure_finite("quadratic_penalty")?;
        Ok(self.push(Op::QuadraticPenalty { weights, anchor }, vec![input], out))
    }

    /// Reverse sweep from a scalar `loss`. Each node at or before `loss` is
    /// visited once, in reverse append order.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        let mut result = Gradients::default();
        self.visits = 0;
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::scalar(1.0));
        }
        for idx in (0..=loss.0).rev() {
            self.visits += 1;
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if let Op::Leaf = node.op {
                let id = NodeId(idx);
                if let Some(name) = self.names.get(&id) {
                    result.names.insert(id, name.clone());
                }
                result.grads.insert(id, upstream);
                continue;
            }
            for (input, g) in self.input_grads(node, &upstream)? {
                assert!(input.0 < idx, "graph edge must point backwards");
                match &mut grads[input.0] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        // leaves are visited in reverse; report them in creation order
        result.grads.sort_keys();
        result.names.sort_keys();
        Ok(result)
    }

    fn input_grads(&self, node: &Node, upstream: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let needs = |i: usize| self.nodes[node.inputs[i].0].requires_grad;
        let val = |i: usize| &self.nodes[node.inputs[i].0].value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { stride, padding } => {
                let has_bias = node.inputs.len() == 3;
                let g = conv::conv2d_backward(
                    val(0),
                    val(1),
                    upstream,
                    *stride,
                    *padding,
                    needs(0),
                    needs(1),
                    has_bias && needs(2),
                )?;
                out.extend(g.input.map(|t| (node.inputs[0], t)));
                out.extend(g.weight.map(|t| (node.inputs[1], t)));
                out.extend(g.bias.map(|t| (node.inputs[2], t)));
            }
            Op::BatchNorm(saved) => {
                let g = norm::batch_norm_backward(
                    upstream,
                    val(1),
                    saved,
                    needs(0),
                    needs(1) || needs(2),
                )?;
                out.extend(g.input.map(|t| (node.inputs[0], t)));
                if needs(1) {
                    out.extend(g.gamma.map(|t| (node.inputs[1], t)));
                }
                if needs(2) {
                    out.extend(g.beta.map(|t| (node.inputs[2], t)));
                }
            }
            Op::GroupNorm(saved) => {
                let g = norm::group_norm_backward(
                    upstream,
                    val(1),
                    saved,
                    needs(0),
                    needs(1) || needs(2),
                )?;
                out.extend(g.input.map(|t| (node.inputs[0], t)));
                if needs(1) {
                    out.extend(g.gamma.map(|t| (node.inputs[1], t)));
                }
                if needs(2) {
                    out.extend(g.beta.map(|t| (node.inputs[2], t)));
                }
            }
            Op::Relu => {
                if needs(0) {
                    out.push((node.inputs[0], ops::relu_backward(val(0), upstream)));
                }
            }
            Op::AvgPool { k } => {
                if needs(0) {
                    out.push((
                        node.inputs[0],
                        ops::avg_pool2d_backward(val(0).shape(), *k, upstream),
                    ));
                }
            }
            Op::GlobalAvgPool => {
                if needs(0) {
                    out.push((
                        node.inputs[0],
                        ops::global_avg_pool_backward(val(0).shape(), upstream),
                    ));
                }
            }
            Op::Linear => {
                let (dx, dw, db) = ops::linear_backward(val(0), val(1), upstream);
                for (i, g) in [dx, dw, db].into_iter().enumerate() {
                    if needs(i) {
                        out.push((node.inputs[i], g));
                    }
                }
            }
            Op::Add => {
                for i in 0..2 {
                    if needs(i) {
                        out.push((node.inputs[i], upstream.clone()));
                    }
                }
            }
            Op::ScaleBy => {
                let s = val(1).item();
                if needs(0) {
                    out.push((node.inputs[0], upstream.map(|g| g * s)));
                }
                if needs(1) {
                    let ds: f64 = upstream.data().iter().zip(val(0).data()).map(|(g, x)| g * x).sum();
                    out.push((node.inputs[1], Tensor::scalar(ds)));
                }
            }
            Op::Softmax => {
                if needs(0) {
                    out.push((node.inputs[0], ops::softmax_backward(&node.value, upstream)));
                }
            }
            Op::SoftmaxEntropy { probs } => {
                if needs(0) {
                    out.push((
                        node.inputs[0],
                        ops::softmax_entropy_backward(val(0), probs, upstream),
                    ));
                }
            }
            Op::CrossEntropy { probs, labels } => {
                if needs(0) {
                    out.push((
                        node.inputs[0],
                        ops::cross_entropy_backward(probs, labels, upstream.item()),
                    ));
                }
            }
            Op::WeightedSum { weights, denom } => {
                if needs(0) {
                    let g = upstream.item() / denom;
                    let data = weights.iter().map(|w| w * g).collect();
                    out.push((
                        node.inputs[0],
                        Tensor::from_parts(val(0).shape().to_vec(), data),
                    ));
                }
            }
            Op::Sum => {
                if needs(0) {
                    out.push((node.inputs[0], Tensor::full(val(0).shape(), upstream.item())));
                }
            }
            Op::QuadraticPenalty { weights, anchor } => {
                if needs(0) {
                    let g = upstream.item();
                    let data = val(0)
                        .data()
                        .iter()
                        .zip(weights.data())
                        .zip(anchor.data())
                        .map(|((x, w), a)| 2.0 * w * (x - a) * g)
                        .collect();
                    out.push((
                        node.inputs[0],
                        Tensor::from_parts(val(0).shape().to_vec(), data),
                    ));
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_scale_gradient() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3], vec![1.0, 2.0, 4.5]).unwrap());
        let alpha = g.named_leaf("alpha", Tensor::scalar(0.3), true);
        let y = g.scale_by(x, alpha).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads.by_name("alpha").unwrap().item(), 7.5);
        assert_eq!(g.backward_visits(), g.len());
    }

    #[test]
    fn frozen_graph_yields_empty_map() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[2]));
        let w = g.leaf(Tensor::scalar(2.0), false);
        let y = g.scale_by(x, w).unwrap();
        let loss = g.sum(y).unwrap();
        assert!(g.backward(loss).unwrap().is_empty());
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::new(vec![2], vec![1.0, -2.0]).unwrap(), true);
        let b = g.add(a, a).unwrap();
        let c = g.add(b, a).unwrap();
        let loss = g.sum(c).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::ones(&[2]), true);
        assert!(g.backward(a).is_err());
    }

    #[test]
    fn frozen_leaf_between_trainable_paths() {
        // trainable -> frozen-weight conv -> loss: gradient reaches the trainable input
        let mut g = Graph::new();
        let x = g.leaf(Tensor::ones(&[1, 1, 2, 2]), true);
        let w = g.leaf(Tensor::full(&[1, 1, 1, 1], 3.0), false);
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads.get(x).unwrap().data(), &[3.0; 4]);
        assert!(grads.get(w).is_none());
    }
}

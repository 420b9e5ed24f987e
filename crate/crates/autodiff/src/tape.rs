//! The dynamic tape: records operations as they run and replays them in
//! reverse to produce gradients.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::error::{AutodiffError, Result};
use crate::op::{CustomOp, OpKind, Padding};
use crate::rule::{BackwardRule, VjpContext};
use crate::tensor::Tensor;

static NEXT_TAPE: AtomicUsize = AtomicUsize::new(0);

/// Reference to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId {
    tape: usize,
    index: usize,
}

impl NodeId {
    pub fn index(self) -> usize {
        self.index
    }
}

/// One recorded operation.
#[derive(Debug)]
pub struct TapeNode {
    pub op: OpKind,
    pub inputs: Vec<NodeId>,
    pub value: Arc<Tensor>,
    pub override_rule: Option<Arc<dyn BackwardRule>>,
}

/// Gradients of a scalar output with respect to requested nodes.
#[derive(Debug, Default)]
pub struct GradientMap {
    grads: HashMap<NodeId, Tensor>,
}

impl GradientMap {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn remove(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// A single-threaded record of one forward computation.
///
/// Node order is creation order, which is always a valid topological order.
#[derive(Debug)]
pub struct Tape {
    id: usize,
    nodes: Vec<TapeNode>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.tape != self.id || id.index >= self.nodes.len() {
            return Err(AutodiffError::UnknownNode(id.index));
        }
        Ok(())
    }

    pub fn node(&self, id: NodeId) -> Result<&TapeNode> {
        self.check(id)?;
        Ok(&self.nodes[id.index])
    }

    /// Forward value of a node.
    ///
    /// # Panics
    /// If `id` belongs to another tape.
    pub fn value(&self, id: NodeId) -> &Tensor {
        assert_eq!(id.tape, self.id, "node from a different tape");
        &self.nodes[id.index].value
    }

    pub fn shared_value(&self, id: NodeId) -> Arc<Tensor> {
        assert_eq!(id.tape, self.id, "node from a different tape");
        Arc::clone(&self.nodes[id.index].value)
    }

    fn push(&mut self, op: OpKind, inputs: Vec<NodeId>, value: Arc<Tensor>) -> NodeId {
        let id = NodeId {
            tape: self.id,
            index: self.nodes.len(),
        };
        self.nodes.push(TapeNode {
            op,
            inputs,
            value,
            override_rule: None,
        });
        id
    }

    /// Adds an input tensor.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(OpKind::Leaf, Vec::new(), Arc::new(value))
    }

    /// Adds a shared tensor (e.g. model parameters) without copying it.
    pub fn constant(&mut self, value: Arc<Tensor>) -> NodeId {
        self.push(OpKind::Leaf, Vec::new(), value)
    }

    /// Evaluates `op` on the given nodes and appends the result.
    pub fn record(&mut self, op: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        for &i in inputs {
            self.check(i)?;
        }
        let values: Vec<&Tensor> = inputs.iter().map(|i| &*self.nodes[i.index].value).collect();
        let out = op.forward(&values)?;
        if !out.all_finite() && values.iter().all(|v| v.all_finite()) {
            return Err(AutodiffError::NonFinite {
                op: op.name().to_string(),
            });
        }
        Ok(self.push(op, inputs.to_vec(), Arc::new(out)))
    }

    /// Replaces the backward rule of `id`; the forward value is untouched.
    pub fn set_override(&mut self, id: NodeId, rule: Arc<dyn BackwardRule>) -> Result<()> {
        self.check(id)?;
        self.nodes[id.index].override_rule = Some(rule);
        Ok(())
    }

    pub fn clear_override(&mut self, id: NodeId) -> Result<()> {
        self.check(id)?;
        self.nodes[id.index].override_rule = None;
        Ok(())
    }

    /// Reverse-mode sweep from a scalar `output` to each of `wrt`.
    ///
    /// Nodes with an override use it in place of their analytic rule. Every
    /// requested node appears in the result, with zeros if it does not
    /// influence `output`.
    pub fn backward(&self, output: NodeId, wrt: &[NodeId]) -> Result<GradientMap> {
        self.check(output)?;
        for &w in wrt {
            self.check(w)?;
        }
        let out_value = &self.nodes[output.index].value;
        if !out_value.is_scalar() {
            return Err(AutodiffError::NotScalar(out_value.shape().to_vec()));
        }
        let last = output.index;
        let mut requested = vec![false; last + 1];
        for w in wrt {
            if w.index <= last {
                requested[w.index] = true;
            }
        }
        let mut needs = requested.clone();
        for i in 0..=last {
            if !needs[i] {
                needs[i] = self.nodes[i].inputs.iter().any(|p| needs[p.index]);
            }
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; last + 1];
        grads[last] = Some(Tensor::full(out_value.shape(), 1.0));
        let mut result = GradientMap::default();
        for i in (0..=last).rev() {
            if !needs[i] {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            let wants: Vec<bool> = node.inputs.iter().map(|p| needs[p.index]).collect();
            if wants.iter().any(|&w| w) {
                let inputs: Vec<&Tensor> = node.inputs.iter().map(|p| &*self.nodes[p.index].value).collect();
                let ctx = VjpContext {
                    inputs: &inputs,
                    output: &node.value,
                    grad: &g,
                    wants: &wants,
                };
                let input_grads = match &node.override_rule {
                    Some(rule) => rule.vjp(&ctx)?,
                    None => node.op.vjp(&ctx)?,
                };
                for ((p, want), ig) in node.inputs.iter().zip(&wants).zip(input_grads) {
                    let (true, Some(ig)) = (*want, ig) else { continue };
                    if ig.numel() != self.nodes[p.index].value.numel() {
                        return Err(crate::error::shape_err(
                            node.op.name(),
                            &[self.nodes[p.index].value.shape(), ig.shape()],
                        ));
                    }
                    match &mut grads[p.index] {
                        Some(acc) => acc.add_assign(&ig)?,
                        slot => *slot = Some(ig),
                    }
                }
            }
            if requested[i] {
                let id = NodeId { tape: self.id, index: i };
                let shape = node.value.shape().to_vec();
                result.grads.insert(id, g.reshape(shape)?);
            }
        }
        for &w in wrt {
            result
                .grads
                .entry(w)
                .or_insert_with(|| Tensor::zeros(self.nodes[w.index].value.shape()));
        }
        Ok(result)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(OpKind::Mul, &[a, b])
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(OpKind::Div, &[a, b])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(OpKind::MatMul, &[a, b])
    }

    pub fn bias_add(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        self.record(OpKind::BiasAdd, &[x, bias])
    }

    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, padding: Padding) -> Result<NodeId> {
        self.record(OpKind::Conv2d { padding }, &[x, kernel])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(OpKind::Relu, &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(OpKind::Sigmoid, &[x])
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(OpKind::Tanh, &[x])
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(OpKind::Exp, &[x])
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(OpKind::Log, &[x])
    }

    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(OpKind::MaxPool2, &[x])
    }

    /// Per-example softmax cross-entropy, shape `[N]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.record(
            OpKind::SoftmaxCrossEntropy {
                labels: labels.to_vec(),
            },
            &[logits],
        )
    }

    /// Per-example logit margin, shape `[N]`.
    pub fn margin(&mut self, logits: NodeId, classes: &[usize], targeted: bool) -> Result<NodeId> {
        self.record(
            OpKind::Margin {
                classes: classes.to_vec(),
                targeted,
            },
            &[logits],
        )
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(OpKind::Sum, &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(OpKind::Mean, &[x])
    }

    pub fn sum_rows(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(OpKind::SumRows, &[x])
    }

    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        self.record(OpKind::Affine { scale, shift }, &[x])
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.record(OpKind::Reshape { shape: shape.to_vec() }, &[x])
    }

    pub fn pad(&mut self, x: NodeId, top: usize, left: usize, out_h: usize, out_w: usize) -> Result<NodeId> {
        self.record(OpKind::Pad { top, left, out_h, out_w }, &[x])
    }

    pub fn crop(&mut self, x: NodeId, top: usize, left: usize, h: usize, w: usize) -> Result<NodeId> {
        self.record(OpKind::Crop { top, left, h, w }, &[x])
    }

    pub fn resize_nearest(&mut self, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
        self.record(OpKind::ResizeNearest { h, w }, &[x])
    }

    pub fn resize_bilinear(&mut self, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
        self.record(OpKind::ResizeBilinear { h, w }, &[x])
    }

    pub fn floor(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(OpKind::Floor, &[x])
    }

    pub fn round(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(OpKind::Round, &[x])
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.record(OpKind::Clamp { lo, hi }, &[x])
    }

    pub fn custom(&mut self, op: Arc<dyn CustomOp>, inputs: &[NodeId]) -> Result<NodeId> {
        self.record(OpKind::Custom(op), inputs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rule::IdentityRule;

    #[test]
    fn square_has_derivative_six_at_three() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y, &[x]).unwrap();
        assert_eq!(g.get(x).unwrap().item(), Some(6.0));
    }

    #[test]
    fn relu_dead_unit_has_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(-2.0));
        let y = t.relu(x).unwrap();
        let g = t.backward(y, &[x]).unwrap();
        assert_eq!(g.get(x).unwrap().item(), Some(0.0));
    }

    #[test]
    fn record_grows_tape_by_one() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = t.leaf(Tensor::vector(vec![3.0, 4.0]));
        let before = t.len();
        let c = t.add(a, b).unwrap();
        assert_eq!(t.len(), before + 1);
        assert_eq!(t.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn matmul_with_zero_matrix_is_zero() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[2, 3]));
        let b = t.leaf(Tensor::new(vec![3, 1], vec![1.5, -2.0, 7.0]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).shape(), &[2, 1]);
        assert_eq!(t.value(c).data(), &[0.0, 0.0]);
    }

    #[test]
    fn relu_forward() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![-2.0, 0.5]));
        let y = t.relu(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.5]);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[2, 3]));
        let b = t.leaf(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        assert!(err.contains("[2, 3]"), "{err}");
        let c = t.leaf(Tensor::zeros(&[4]));
        assert!(t.add(a, c).is_err());
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(x, &[x]), Err(AutodiffError::NotScalar(_))));
    }

    #[test]
    fn foreign_nodes_are_rejected() {
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let x = t1.leaf(Tensor::scalar(1.0));
        let y = t2.leaf(Tensor::scalar(1.0));
        assert!(matches!(t1.backward(x, &[y]), Err(AutodiffError::UnknownNode(_))));
        assert!(t2.set_override(x, Arc::new(IdentityRule)).is_err() || x.index() == y.index());
    }

    #[test]
    fn log_of_zero_raises_instead_of_producing_infinity() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(0.0));
        assert!(matches!(t.log(x), Err(AutodiffError::NonFinite { .. })));
        let one = t.leaf(Tensor::scalar(1.0));
        assert!(t.div(one, x).is_err());
    }

    #[test]
    fn straight_through_round() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(0.7));
        let y = t.round(x).unwrap();
        assert_eq!(t.value(y).item(), Some(1.0));
        let g = t.backward(y, &[x]).unwrap();
        assert_eq!(g.get(x).unwrap().item(), Some(0.0));
        t.set_override(y, Arc::new(IdentityRule)).unwrap();
        let g = t.backward(y, &[x]).unwrap();
        assert_eq!(g.get(x).unwrap().item(), Some(1.0));
        assert_eq!(t.value(y).item(), Some(1.0));
    }

    #[test]
    fn unrelated_leaf_gets_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        let z = t.leaf(Tensor::zeros(&[3]));
        let s = t.sum(x).unwrap();
        let g = t.backward(s, &[x, z, x]).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.get(z).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn div_backward_guards_tiny_divisors() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::scalar(1.0));
        let b = t.leaf(Tensor::scalar(1e-300));
        let q = t.div(a, b).unwrap();
        let g = t.backward(q, &[a, b]).unwrap();
        assert_eq!(g.get(a).unwrap().item(), Some(1e12));
        assert!(g.get(b).unwrap().all_finite());
    }
}

//! Backward rules and the substitution mechanism behind BPDA.

use std::fmt;

use crate::error::{invalid, Result};
use crate::op::OpKind;
use crate::tensor::Tensor;

/// Everything a backward rule sees for one node.
pub struct VjpContext<'a> {
    /// Forward values of the node's inputs.
    pub inputs: &'a [&'a Tensor],
    /// Forward value of the node itself.
    pub output: &'a Tensor,
    /// Upstream gradient, shaped like `output`.
    pub grad: &'a Tensor,
    /// Which inputs need a gradient; rules may return `None` for the rest.
    pub wants: &'a [bool],
}

/// A vector-Jacobian product that can stand in for a node's analytic rule.
pub trait BackwardRule: Send + Sync + fmt::Debug {
    fn vjp(&self, ctx: &VjpContext<'_>) -> Result<Vec<Option<Tensor>>>;
}

/// Straight-through estimator: the upstream gradient flows unchanged into
/// the first input.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityRule;

impl BackwardRule for IdentityRule {
    fn vjp(&self, ctx: &VjpContext<'_>) -> Result<Vec<Option<Tensor>>> {
        let Some(x) = ctx.inputs.first() else {
            return Err(invalid("identity_rule", "node has no inputs"));
        };
        if x.numel() != ctx.grad.numel() {
            return Err(invalid(
                "identity_rule",
                format!("input shape {:?} differs from output shape {:?}", x.shape(), ctx.grad.shape()),
            ));
        }
        let mut out = vec![None; ctx.inputs.len()];
        out[0] = Some(ctx.grad.clone().reshape(x.shape().to_vec())?);
        Ok(out)
    }
}

/// Blocks all gradient flow.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroRule;

impl BackwardRule for ZeroRule {
    fn vjp(&self, ctx: &VjpContext<'_>) -> Result<Vec<Option<Tensor>>> {
        Ok(ctx
            .inputs
            .iter()
            .zip(ctx.wants)
            .map(|(x, &w)| w.then(|| Tensor::zeros(x.shape())))
            .collect())
    }
}

/// The analytic rule of a given op kind, usable as an explicit override.
#[derive(Clone, Debug)]
pub struct AnalyticRule(pub OpKind);

impl BackwardRule for AnalyticRule {
    fn vjp(&self, ctx: &VjpContext<'_>) -> Result<Vec<Option<Tensor>>> {
        self.0.vjp(ctx)
    }
}

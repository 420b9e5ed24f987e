//! Reverse-mode automatic differentiation over a dynamic tape.
//!
//! Every recorded node carries its analytic vector-Jacobian product and may
//! additionally carry an override that replaces it on the backward pass only.
//! Overrides are how straight-through estimators and backward-pass
//! differentiable approximations are expressed: the forward value stays the
//! true function, the gradient comes from a surrogate.
//!
//! ```
//! use std::sync::Arc;
//! use advlab_autodiff::{IdentityRule, Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(0.7));
//! let y = tape.round(x).unwrap();
//! tape.set_override(y, Arc::new(IdentityRule)).unwrap();
//! let grads = tape.backward(y, &[x]).unwrap();
//! assert_eq!(tape.value(y).item(), Some(1.0));
//! assert_eq!(grads.get(x).unwrap().item(), Some(1.0));
//! ```

mod eot;
mod error;
pub mod kernels;
mod op;
mod rule;
mod tape;
mod tensor;

pub use eot::{
    expectation_gradient, expectation_value_and_gradient, value_and_gradient, weighted_expectation_value_and_gradient,
    ValueAndGradient,
};
pub use error::{AutodiffError, Result};
pub use op::{best_other, guard_divisor, log_sum_exp, CustomOp, OpKind, Padding, DIV_GUARD};
pub use rule::{AnalyticRule, BackwardRule, IdentityRule, VjpContext, ZeroRule};
pub use tape::{GradientMap, NodeId, Tape, TapeNode};
pub use tensor::Tensor;

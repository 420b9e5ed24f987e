//! Gradient estimation for functions with randomized internals.
//!
//! The gradient of an expectation is the expectation of gradients, so the
//! estimator below runs one fresh tape per draw and averages the results.

use std::error::Error;

use crate::error::{AutodiffError, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Mean objective value and mean gradient over a set of draws.
#[derive(Clone, Debug)]
pub struct ValueAndGradient {
    pub value: f64,
    pub gradient: Tensor,
}

/// Value and gradient of a scalar function recorded by `f` at `x`.
pub fn value_and_gradient<F, E>(f: F, x: &Tensor) -> Result<ValueAndGradient>
where
    F: FnOnce(&mut Tape, NodeId) -> std::result::Result<NodeId, E>,
    E: Into<Box<dyn Error + Send + Sync>>,
{
    let mut f = Some(f);
    expectation_value_and_gradient(|tape, x, _| (f.take().expect("called once"))(tape, x), x, 1)
}

/// Averages value and gradient over `samples` invocations of `f`.
///
/// `f` receives a fresh tape, the node holding `x`, and the draw index; it
/// must return a scalar node. Pass the index through to a deterministic
/// transform to enumerate a finite transformation set exactly, or ignore it
/// and draw from an owned RNG to sample. A running mean is used, so repeated
/// identical draws reproduce the single-draw result bit for bit.
pub fn expectation_value_and_gradient<F, E>(f: F, x: &Tensor, samples: usize) -> Result<ValueAndGradient>
where
    F: FnMut(&mut Tape, NodeId, usize) -> std::result::Result<NodeId, E>,
    E: Into<Box<dyn Error + Send + Sync>>,
{
    if samples == 0 {
        return Err(crate::error::invalid("expectation_gradient", "samples must be at least 1"));
    }
    accumulate(f, x, &vec![1.0; samples])
}

/// Weighted variant for enumerating a finite distribution exactly.
///
/// `weights[i]` is the probability mass of draw `i`; weights must be
/// non-negative with a positive total and are normalized internally.
pub fn weighted_expectation_value_and_gradient<F, E>(f: F, x: &Tensor, weights: &[f64]) -> Result<ValueAndGradient>
where
    F: FnMut(&mut Tape, NodeId, usize) -> std::result::Result<NodeId, E>,
    E: Into<Box<dyn Error + Send + Sync>>,
{
    if weights.is_empty() {
        return Err(crate::error::invalid("expectation_gradient", "at least one weight is required"));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || weights.iter().sum::<f64>() <= 0.0 {
        return Err(crate::error::invalid(
            "expectation_gradient",
            "weights must be finite, non-negative and not all zero",
        ));
    }
    accumulate(f, x, weights)
}

fn accumulate<F, E>(mut f: F, x: &Tensor, weights: &[f64]) -> Result<ValueAndGradient>
where
    F: FnMut(&mut Tape, NodeId, usize) -> std::result::Result<NodeId, E>,
    E: Into<Box<dyn Error + Send + Sync>>,
{
    let mut mean_value = 0.0;
    let mut mean_grad = Tensor::zeros(x.shape());
    let mut seen = 0.0;
    for (i, &weight) in weights.iter().enumerate() {
        let mut tape = Tape::new();
        let xn = tape.leaf(x.clone());
        let out = f(&mut tape, xn, i).map_err(|e| AutodiffError::Draw {
            index: i,
            source: e.into(),
        })?;
        let value = tape
            .value(out)
            .item()
            .ok_or_else(|| AutodiffError::NotScalar(tape.value(out).shape().to_vec()))?;
        if weight == 0.0 {
            continue;
        }
        let mut grads = tape.backward(out, &[xn])?;
        let g = grads.remove(xn).expect("requested leaf present");
        seen += weight;
        if seen == weight {
            mean_value = value;
            mean_grad = g;
        } else {
            let w = weight / seen;
            mean_value += (value - mean_value) * w;
            for (m, v) in mean_grad.data_mut().iter_mut().zip(g.data()) {
                *m += (v - *m) * w;
            }
        }
    }
    Ok(ValueAndGradient {
        value: mean_value,
        gradient: mean_grad,
    })
}

/// Sample mean of per-draw gradients.
pub fn expectation_gradient<F, E>(f: F, x: &Tensor, samples: usize) -> Result<Tensor>
where
    F: FnMut(&mut Tape, NodeId, usize) -> std::result::Result<NodeId, E>,
    E: Into<Box<dyn Error + Send + Sync>>,
{
    expectation_value_and_gradient(f, x, samples).map(|r| r.gradient)
}

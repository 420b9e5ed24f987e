//! Thermometer encoding and its piecewise-linear relaxation.
//!
//! Bit `k` (for `k = 0..l`) of the code for pixel value `x` is set when
//! `x > k/l`. The relaxation replaces each bit by `clamp(x - k/l, 0, 1)`,
//! which is positive exactly where the bit is set, so the code is the
//! ceiling of the relaxation.

use std::sync::Arc;

use advlab_autodiff::{BackwardRule, NodeId, Tape, Tensor, VjpContext};

use super::{shattered_nodes, Differentiability, Draw, InputStage, ShatteredOp, StageNodes, Surrogate};
use crate::error::{invalid, Result};

fn with_levels(x: &Tensor, levels: usize, bit: impl Fn(f64, f64) -> f64) -> Tensor {
    let mut shape = x.shape().to_vec();
    shape.push(levels);
    let mut data = Vec::with_capacity(x.numel() * levels);
    for &v in x.data() {
        for k in 0..levels {
            data.push(bit(v, k as f64 / levels as f64));
        }
    }
    Tensor::new(shape, data).expect("shape matches data")
}

/// `τ(x)_k = 1 if x > k/l else 0`, with a new trailing axis of size `l`.
pub fn thermometer_encode(x: &Tensor, levels: usize) -> Tensor {
    with_levels(x, levels, |v, t| if v > t { 1.0 } else { 0.0 })
}

/// `τ̂(x)_k = min(max(x - k/l, 0), 1)`.
pub fn thermometer_surrogate(x: &Tensor, levels: usize) -> Tensor {
    with_levels(x, levels, |v, t| (v - t).clamp(0.0, 1.0))
}

/// Backward rule of `τ̂`: bit `k` passes gradient where `0 < x - k/l < 1`.
#[derive(Clone, Copy, Debug)]
pub struct ThermometerSurrogate {
    pub levels: usize,
}

impl BackwardRule for ThermometerSurrogate {
    fn vjp(&self, ctx: &VjpContext<'_>) -> advlab_autodiff::Result<Vec<Option<Tensor>>> {
        let x = ctx.inputs[0];
        let l = self.levels;
        if ctx.grad.numel() != x.numel() * l {
            return Err(advlab_autodiff::AutodiffError::ShapeMismatch {
                op: "thermometer_surrogate".into(),
                shapes: vec![x.shape().to_vec(), ctx.grad.shape().to_vec()],
            });
        }
        let g = ctx.grad.data();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                (0..l)
                    .filter(|&k| {
                        let d = v - k as f64 / l as f64;
                        d > 0.0 && d < 1.0
                    })
                    .map(|k| g[i * l + k])
                    .sum()
            })
            .collect();
        Ok(vec![Some(Tensor::new(x.shape().to_vec(), data)?)])
    }
}

/// Thermometer-encoding stage; the classifier sees `C·l` channels.
#[derive(Clone, Debug)]
pub struct Thermometer {
    levels: usize,
}

impl Thermometer {
    pub fn new(levels: usize) -> Result<Self> {
        if levels < 2 {
            return Err(invalid(format!("thermometer needs at least 2 levels, got {levels}")));
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> usize {
        self.levels
    }
}

impl InputStage for Thermometer {
    fn name(&self) -> &str {
        "thermometer"
    }

    fn differentiability(&self) -> Differentiability {
        Differentiability::Shattered
    }

    fn is_stochastic(&self) -> bool {
        false
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mut s = input.to_vec();
        match s.last_mut() {
            Some(c) => *c *= self.levels,
            None => return Err(invalid("thermometer input has no channel axis")),
        }
        Ok(s)
    }

    fn record(&self, tape: &mut Tape, x: NodeId, _draw: Draw) -> Result<StageNodes> {
        let l = self.levels;
        let mut nodes = shattered_nodes(tape, x, ShatteredOp::new("thermometer", move |x| Ok(thermometer_encode(x, l))))?;
        let mut shape = tape.value(x).shape().to_vec();
        *shape.last_mut().expect("checked rank") *= l;
        nodes.output = tape.reshape(nodes.output, &shape)?;
        Ok(nodes)
    }

    fn default_surrogate(&self) -> Option<Surrogate> {
        Some(Surrogate::Rule(Arc::new(ThermometerSurrogate { levels: self.levels })))
    }
}

//! Stochastic activation pruning.

use std::sync::Arc;

use advlab_autodiff::{CustomOp, NodeId, Tape, Tensor, VjpContext, DIV_GUARD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::ActivationHook;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SapConfig {
    /// Multinomial draws per layer as a fraction of the layer width.
    #[serde(default = "default_fraction")]
    pub sample_fraction: f64,
}

fn default_fraction() -> f64 {
    0.75
}

impl Default for SapConfig {
    fn default() -> Self {
        Self {
            sample_fraction: default_fraction(),
        }
    }
}

impl SapConfig {
    pub fn samples_for(&self, width: usize) -> usize {
        ((self.sample_fraction * width as f64).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_fraction > 0.0) || !self.sample_fraction.is_finite() {
            return Err(invalid("sap sample_fraction must be positive"));
        }
        Ok(())
    }
}

/// Probability that unit with mass `p` is hit at least once in `r` draws.
fn keep_probability(p: f64, r: usize) -> f64 {
    -((r as f64) * (-p).ln_1p()).exp_m1()
}

/// Per-unit multipliers for one row: `1/P(keep)` for sampled units, 0 else.
fn row_multipliers(a: &[f64], r: usize, rng: &mut impl Rng) -> Vec<f64> {
    let total: f64 = a.iter().map(|v| v.abs()).sum();
    if total == 0.0 {
        return vec![1.0; a.len()];
    }
    let mut cumulative = Vec::with_capacity(a.len());
    let mut acc = 0.0;
    for v in a {
        acc += v.abs();
        cumulative.push(acc);
    }
    let mut hit = vec![false; a.len()];
    for _ in 0..r {
        let u = rng.random::<f64>() * total;
        let mut i = cumulative.partition_point(|&c| c <= u).min(a.len() - 1);
        while a[i] == 0.0 {
            // Zero-mass units can only be reached through rounding at the
            // top end; step back to the last unit with mass.
            i -= 1;
        }
        hit[i] = true;
    }
    a.iter()
        .zip(&hit)
        .map(|(v, &h)| {
            if h {
                1.0 / keep_probability(v.abs() / total, r).max(DIV_GUARD)
            } else {
                0.0
            }
        })
        .collect()
}

fn multipliers(a: &Tensor, r: usize, rng: &mut impl Rng) -> Tensor {
    let mut data = Vec::with_capacity(a.numel());
    for i in 0..a.rows() {
        data.extend(row_multipliers(a.row(i), r, rng));
    }
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Samples `r` units per row with probability proportional to magnitude,
/// zeroes the rest and rescales survivors by their inverse keep probability.
pub fn sap_layer(a: &Tensor, r: usize, rng: &mut impl Rng) -> Result<Tensor> {
    if r == 0 {
        return Err(invalid("sap needs at least one sample"));
    }
    let m = multipliers(a, r, rng);
    Ok(a.zip_map(&m, |x, k| x * k)?)
}

/// Multiplication by a fixed mask drawn at record time.
#[derive(Debug)]
struct SapOp {
    multipliers: Tensor,
}

impl CustomOp for SapOp {
    fn name(&self) -> &str {
        "sap"
    }

    fn forward(&self, inputs: &[&Tensor]) -> advlab_autodiff::Result<Tensor> {
        inputs[0].zip_map(&self.multipliers, |x, k| x * k)
    }

    fn vjp(&self, ctx: &VjpContext<'_>) -> advlab_autodiff::Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(ctx.grad.zip_map(&self.multipliers, |g, k| g * k)?)])
    }
}

/// Applies pruning after every ReLU of a classifier.
pub struct SapHook {
    config: SapConfig,
    rng: ChaCha8Rng,
}

impl SapHook {
    pub fn new(config: SapConfig, seed: u64) -> Self {
        Self {
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl ActivationHook for SapHook {
    fn after_activation(&mut self, tape: &mut Tape, node: NodeId, _layer: usize) -> Result<NodeId> {
        let a = tape.value(node);
        let r = self.config.samples_for(a.row_len());
        let m = multipliers(a, r, &mut self.rng);
        Ok(tape.custom(Arc::new(SapOp { multipliers: m }), &[node])?)
    }
}

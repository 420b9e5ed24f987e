use advlab_autodiff::{weighted_expectation_value_and_gradient, NodeId, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Eot, Goal};
use crate::defenses::{ChainDraw, DefendedModel, Differentiability};
use crate::error::{invalid, Error, Result};
use crate::model::argmax_rows;

enum Plan {
    Fixed,
    Fresh(usize),
    Weighted(Vec<(ChainDraw, f64)>),
}

/// Gradient of a per-example objective through a defended model.
pub struct GradientOracle<'a> {
    model: &'a DefendedModel,
    bpda: bool,
    plan: Plan,
    rng: ChaCha8Rng,
    probes: usize,
}

/// Result of one oracle call. Per-example quantities are averaged over the
/// draws with their weights, except `worst_margin` which is the maximum.
#[derive(Clone, Debug)]
pub struct Probe {
    pub values: Vec<f64>,
    /// Weighted fraction of draws on which the goal was reached.
    pub adversarial: Vec<f64>,
    /// Largest goal margin over the draws; negative means reached everywhere.
    pub worst_margin: Vec<f64>,
    /// Gradient of the summed objective with respect to the leaf.
    pub gradient: Tensor,
    /// The model input produced from the leaf.
    pub input: Tensor,
}

impl<'a> GradientOracle<'a> {
    pub fn new(model: &'a DefendedModel, bpda: bool, eot: Eot, seed: u64) -> Result<Self> {
        if bpda {
            for s in &model.stages {
                if s.differentiability() == Differentiability::Shattered && model.surrogates.get(s.name()).is_none() {
                    return Err(Error::MissingSurrogate(s.name().to_string()));
                }
            }
        }
        let plan = match eot {
            Eot::Single if model.is_stochastic() => Plan::Fresh(1),
            Eot::Single => Plan::Fixed,
            Eot::Frozen => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Plan::Weighted(vec![(model.sample_draw(&mut rng), 1.0)])
            }
            Eot::Samples(0) => return Err(invalid("eot needs at least one sample")),
            Eot::Samples(k) => Plan::Fresh(k),
            Eot::Enumerate => Plan::Weighted(
                model
                    .enumerate()
                    .ok_or_else(|| invalid(format!("defense `{}` has no finite draw set", model.describe())))?,
            ),
        };
        Ok(Self {
            model,
            bpda,
            plan,
            rng: ChaCha8Rng::seed_from_u64(seed),
            probes: 0,
        })
    }

    /// Number of `probe` calls so far.
    pub fn probes(&self) -> usize {
        self.probes
    }

    /// Evaluates `objective` (a per-example `[N]` node built from the model
    /// input and logits) at `leaf`, where `input` maps the leaf to the model
    /// input, and returns per-example statistics and the leaf gradient.
    pub fn probe<I, O>(&mut self, leaf: &Tensor, goal: &Goal, input: I, objective: O) -> Result<Probe>
    where
        I: Fn(&mut Tape, NodeId) -> Result<NodeId>,
        O: Fn(&mut Tape, NodeId, NodeId) -> Result<NodeId>,
    {
        self.probes += 1;
        let (draws, weights): (Vec<ChainDraw>, Vec<f64>) = match &self.plan {
            Plan::Fixed => (vec![self.model.fixed_draw()], vec![1.0]),
            Plan::Fresh(k) => ((0..*k).map(|_| self.model.sample_draw(&mut self.rng)).collect(), vec![1.0; *k]),
            Plan::Weighted(all) => all.iter().cloned().unzip(),
        };
        let n = goal.len();
        let mut per_draw: Vec<(Vec<f64>, Vec<usize>, Vec<f64>)> = Vec::with_capacity(draws.len());
        let mut first_input = None;
        let model = self.model;
        let bpda = self.bpda;
        let vg = weighted_expectation_value_and_gradient(
            |tape: &mut Tape, leaf: NodeId, i: usize| -> Result<NodeId> {
                let x = input(tape, leaf)?;
                let trace = model.record(tape, x, &draws[i], bpda)?;
                let obj = objective(tape, x, trace.output)?;
                let margin = tape.margin(trace.output, goal.classes(), goal.is_targeted())?;
                if tape.value(obj).numel() != n {
                    return Err(Error::Shape(format!(
                        "objective must have one entry per example, got {:?}",
                        tape.value(obj).shape()
                    )));
                }
                per_draw.push((
                    tape.value(obj).data().to_vec(),
                    argmax_rows(tape.value(trace.output)),
                    tape.value(margin).data().to_vec(),
                ));
                if first_input.is_none() {
                    first_input = Some(tape.value(x).clone());
                }
                Ok(tape.sum(obj)?)
            },
            leaf,
            &weights,
        )?;
        if !vg.gradient.all_finite() {
            return Err(invalid("non-finite input gradient"));
        }
        let total: f64 = weights.iter().sum();
        let mut values = vec![0.0; n];
        let mut adversarial = vec![0.0; n];
        let mut worst_margin = vec![f64::NEG_INFINITY; n];
        for ((vals, preds, margins), w) in per_draw.iter().zip(&weights) {
            if *w == 0.0 {
                continue;
            }
            let w = w / total;
            for i in 0..n {
                values[i] += w * vals[i];
                if goal.achieved(i, preds[i]) {
                    adversarial[i] += w;
                }
                worst_margin[i] = worst_margin[i].max(margins[i]);
            }
        }
        // Guard against rounding in the weight sum.
        for a in &mut adversarial {
            if (*a - 1.0).abs() < 1e-9 {
                *a = 1.0;
            }
        }
        Ok(Probe {
            values,
            adversarial,
            worst_margin,
            gradient: vg.gradient,
            input: first_input.expect("at least one draw"),
        })
    }
}

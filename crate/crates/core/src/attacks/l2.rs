use std::sync::Arc;

use advlab_autodiff::{NodeId, Tape, Tensor};
use rand::Rng;

use super::{finish, Adam, AttackConfig, AttackOutcome, Candidate, Goal, GradientOracle};
use crate::defenses::DefendedModel;
use crate::error::{Error, Result};
use crate::seeds::rng_for;

const DRAW_STREAM: u64 = 11;
const EVAL_STREAM: u64 = 13;

/// Upper end of the constant search before any success has been seen.
const UNBOUNDED: f64 = 1e10;

/// Maps free optimization variables to model inputs.
pub trait Parameterization {
    /// Starting variables, reused at every step of the constant search.
    fn init(&self) -> Tensor;
    fn record(&self, tape: &mut Tape, leaf: NodeId) -> Result<NodeId>;
    /// The input at [`Parameterization::init`], exactly.
    fn start_image(&self) -> Result<Tensor>;
}

/// `x = (tanh w + 1)/2`, which keeps every pixel inside `[0,1]`.
pub struct BoxParam {
    x: Tensor,
    w0: Tensor,
}

impl BoxParam {
    pub fn new(x: &Tensor) -> Self {
        let w0 = x.map(|v| (2.0 * v.clamp(1e-6, 1.0 - 1e-6) - 1.0).atanh());
        Self { x: x.clone(), w0 }
    }
}

impl Parameterization for BoxParam {
    fn init(&self) -> Tensor {
        self.w0.clone()
    }

    fn record(&self, tape: &mut Tape, leaf: NodeId) -> Result<NodeId> {
        let t = tape.tanh(leaf)?;
        Ok(tape.affine(t, 0.5, 0.5)?)
    }

    fn start_image(&self) -> Result<Tensor> {
        Ok(self.x.clone())
    }
}

/// Result of [`lagrangian_search`] before success evaluation.
pub struct SearchResult {
    pub images: Tensor,
    /// Optimization variables of the selected images, where one was found
    /// during the search (`None` for examples returned at the start image).
    pub leaves: Vec<Option<Vec<f64>>>,
    pub margins: Vec<f64>,
    pub iterations: usize,
}

/// Per-example `‖x' − x‖² + c·max(margin, −κ)` minimized with Adam over the
/// variables of `param`, with a per-example binary search on `c`.
///
/// The margin is taken on logits: `z_y − max_{i≠y} z_i` untargeted,
/// `max_{i≠t} z_i − z_t` targeted. A candidate counts as adversarial when
/// every draw of the step reached the goal with margin at most `−κ`; among
/// those the one closest to `x` is kept. Examples that already qualify at the
/// start image are returned unchanged.
pub fn lagrangian_search(
    model: &DefendedModel,
    x: &Tensor,
    goal: &Goal,
    param: &dyn Parameterization,
    cfg: &AttackConfig,
) -> Result<SearchResult> {
    cfg.validate()?;
    if goal.is_empty() {
        return Err(Error::EmptyEvaluationSet);
    }
    let n = goal.len();
    let kappa = cfg.confidence;
    let mut oracle = GradientOracle::new(model, cfg.bpda, cfg.eot, rng_for(cfg.seed, DRAW_STREAM).random())?;
    let reference = Arc::new(x.clone());
    let qualifies = |adv: f64, margin: f64| adv >= 1.0 && margin <= -kappa;

    let start = param.start_image()?;
    let clean = oracle.probe(&start, goal, |_, leaf| Ok(leaf), |tape, _, logits| {
        Ok(tape.margin(logits, goal.classes(), goal.is_targeted())?)
    })?;
    let done: Vec<bool> = (0..n).map(|i| qualifies(clean.adversarial[i], clean.worst_margin[i])).collect();

    let mut best = start.clone();
    let mut best_dist = vec![f64::INFINITY; n];
    let mut best_margin = clean.worst_margin.clone();
    let mut leaves: Vec<Option<Vec<f64>>> = vec![None; n];
    let mut fallback_margin = vec![f64::INFINITY; n];
    for i in 0..n {
        if done[i] {
            best_dist[i] = sq_dist(start.row(i), x.row(i));
        }
    }
    let mut c = vec![cfg.initial_const; n];
    let mut lo = vec![0.0; n];
    let mut hi = vec![UNBOUNDED; n];
    let steps = cfg.binary_search_steps.max(1);
    for _ in 0..steps {
        let consts = Arc::new(Tensor::vector(c.clone()));
        let objective = |tape: &mut Tape, input: NodeId, logits: NodeId| -> Result<NodeId> {
            let r = tape.constant(reference.clone());
            let d = tape.sub(input, r)?;
            let d2 = tape.mul(d, d)?;
            let dist = tape.sum_rows(d2)?;
            let m = tape.margin(logits, goal.classes(), goal.is_targeted())?;
            let shifted = tape.affine(m, 1.0, kappa)?;
            let hinge = tape.relu(shifted)?;
            let k = tape.constant(consts.clone());
            let weighted = tape.mul(hinge, k)?;
            Ok(tape.add(dist, weighted)?)
        };
        let mut leaf = param.init();
        let mut adam = Adam::new(cfg.learning_rate);
        let mut found = vec![false; n];
        for t in 0..=cfg.iterations {
            let p = oracle.probe(&leaf, goal, |tape, l| param.record(tape, l), objective)?;
            for i in 0..n {
                if done[i] {
                    continue;
                }
                let margin = p.worst_margin[i];
                if qualifies(p.adversarial[i], margin) {
                    found[i] = true;
                    let d = sq_dist(p.input.row(i), x.row(i));
                    if d < best_dist[i] {
                        best_dist[i] = d;
                        best_margin[i] = margin;
                        best.row_mut(i).copy_from_slice(p.input.row(i));
                        leaves[i] = Some(leaf.row(i).to_vec());
                    }
                } else if best_dist[i].is_infinite() && margin < fallback_margin[i] {
                    fallback_margin[i] = margin;
                    best_margin[i] = margin;
                    best.row_mut(i).copy_from_slice(p.input.row(i));
                    leaves[i] = Some(leaf.row(i).to_vec());
                }
            }
            if t == cfg.iterations {
                break;
            }
            adam.step(&mut leaf, &p.gradient);
        }
        for i in 0..n {
            if found[i] {
                hi[i] = hi[i].min(c[i]);
                c[i] = (lo[i] + hi[i]) / 2.0;
            } else {
                lo[i] = lo[i].max(c[i]);
                c[i] = if hi[i] < UNBOUNDED { (lo[i] + hi[i]) / 2.0 } else { c[i] * 10.0 };
            }
        }
    }
    Ok(SearchResult {
        images: best,
        leaves,
        margins: best_margin,
        iterations: steps * cfg.iterations,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum()
}

/// Lagrangian ℓ₂ attack in the box `[0,1]` via the `tanh` change of variables.
pub fn lagrangian_l2(model: &DefendedModel, x: &Tensor, goal: &Goal, cfg: &AttackConfig) -> Result<Vec<AttackOutcome>> {
    let search = lagrangian_search(model, x, goal, &BoxParam::new(x), cfg)?;
    let cand = Candidate {
        images: search.images,
        iterations: search.iterations,
        losses: search.margins,
        zero_gradient: vec![false; goal.len()],
    };
    finish(model, x, goal, cand, cfg, &mut rng_for(cfg.seed, EVAL_STREAM))
}

/// The ℓ₂ attack with the margin requirement raised to `κ = cfg.confidence`.
/// It only sees the classifier, never any detector placed beside it.
pub fn high_confidence_attack(
    model: &DefendedModel,
    x: &Tensor,
    goal: &Goal,
    cfg: &AttackConfig,
) -> Result<Vec<AttackOutcome>> {
    lagrangian_l2(model, x, goal, cfg)
}

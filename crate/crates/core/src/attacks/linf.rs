use advlab_autodiff::{NodeId, Tape, Tensor};
use rand::Rng;

use super::{finish, AttackConfig, AttackOutcome, Candidate, Goal, GradientOracle, PgdLoss};
use crate::defenses::DefendedModel;
use crate::error::{Error, Result};
use crate::model::sign;
use crate::seeds::rng_for;

const DRAW_STREAM: u64 = 1;
const START_STREAM: u64 = 2;
const EVAL_STREAM: u64 = 3;

fn identity(_: &mut Tape, leaf: NodeId) -> Result<NodeId> {
    Ok(leaf)
}

/// The ascended objective: cross-entropy to the true label or its negation
/// towards the target, or the capped negative margin.
fn objective<'a>(goal: &'a Goal, cfg: &AttackConfig) -> impl Fn(&mut Tape, NodeId, NodeId) -> Result<NodeId> + 'a {
    let (loss, kappa) = (cfg.loss, cfg.confidence);
    move |tape, _x, logits| match loss {
        PgdLoss::CrossEntropy => {
            let ce = tape.softmax_cross_entropy(logits, goal.classes())?;
            Ok(if goal.is_targeted() {
                tape.affine(ce, -1.0, 0.0)?
            } else {
                ce
            })
        }
        PgdLoss::Margin => {
            let m = tape.margin(logits, goal.classes(), goal.is_targeted())?;
            let shifted = tape.affine(m, 1.0, kappa)?;
            let r = tape.relu(shifted)?;
            Ok(tape.affine(r, -1.0, kappa)?)
        }
    }
}

fn check_batch(x: &Tensor, goal: &Goal) -> Result<()> {
    if goal.is_empty() {
        return Err(Error::EmptyEvaluationSet);
    }
    if x.shape().first() != Some(&goal.len()) {
        return Err(Error::Shape(format!("{} labels for a batch of shape {:?}", goal.len(), x.shape())));
    }
    Ok(())
}

fn zero_rows(g: &Tensor) -> Vec<bool> {
    (0..g.rows()).map(|i| g.row(i).iter().all(|&v| v == 0.0)).collect()
}

/// One signed-gradient step of size ε, clipped to `[0,1]`. Examples whose
/// gradient is identically zero are returned unchanged and flagged.
pub fn fgsm(model: &DefendedModel, x: &Tensor, goal: &Goal, cfg: &AttackConfig) -> Result<Vec<AttackOutcome>> {
    cfg.validate()?;
    check_batch(x, goal)?;
    let mut oracle = GradientOracle::new(model, cfg.bpda, cfg.eot, rng_for(cfg.seed, DRAW_STREAM).random())?;
    let objective = objective(goal, cfg);
    let p = oracle.probe(x, goal, identity, &objective)?;
    let zero = zero_rows(&p.gradient);
    let mut adv = x.clone();
    for (i, z) in zero.iter().enumerate() {
        if *z {
            continue;
        }
        let g = p.gradient.row(i).to_vec();
        for (a, gi) in adv.row_mut(i).iter_mut().zip(&g) {
            *a = (*a + cfg.epsilon * sign(*gi)).clamp(0.0, 1.0);
        }
    }
    let after = oracle.probe(&adv, goal, identity, &objective)?;
    let cand = Candidate {
        images: adv,
        iterations: 1,
        losses: after.values,
        zero_gradient: zero,
    };
    finish(model, x, goal, cand, cfg, &mut rng_for(cfg.seed, EVAL_STREAM))
}

/// Projected signed-gradient ascent in the ℓ∞ ball of radius ε around `x`,
/// intersected with `[0,1]`.
///
/// Each restart optionally starts from a uniform point in the ball. The
/// returned iterate is, per example, the one that reached the goal on the
/// largest fraction of draws, ties broken by the larger objective; the
/// starting point itself is never returned.
pub fn pgd_linf(model: &DefendedModel, x: &Tensor, goal: &Goal, cfg: &AttackConfig) -> Result<Vec<AttackOutcome>> {
    cfg.validate()?;
    check_batch(x, goal)?;
    let eps = cfg.epsilon;
    let alpha = cfg.step();
    let mut oracle = GradientOracle::new(model, cfg.bpda, cfg.eot, rng_for(cfg.seed, DRAW_STREAM).random())?;
    let mut start_rng = rng_for(cfg.seed, START_STREAM);
    let objective = objective(goal, cfg);
    let n = goal.len();
    let mut best = x.clone();
    let mut best_key: Vec<Option<(f64, f64)>> = vec![None; n];
    let mut zero = vec![true; n];
    for _ in 0..cfg.restarts {
        let mut cur = x.clone();
        if cfg.random_start && eps > 0.0 {
            for v in cur.data_mut() {
                *v = (*v + start_rng.random_range(-eps..=eps)).clamp(0.0, 1.0);
            }
        }
        for t in 0..=cfg.iterations {
            let p = oracle.probe(&cur, goal, identity, &objective)?;
            if t > 0 {
                for i in 0..n {
                    let key = (p.adversarial[i], p.values[i]);
                    if best_key[i].is_none_or(|b| key > b) {
                        best_key[i] = Some(key);
                        best.row_mut(i).copy_from_slice(cur.row(i));
                    }
                }
            }
            if t == cfg.iterations {
                break;
            }
            for i in 0..n {
                let g = p.gradient.row(i);
                if g.iter().any(|&v| v != 0.0) {
                    zero[i] = false;
                }
                let origin = x.row(i);
                for ((c, o), gi) in cur.row_mut(i).iter_mut().zip(origin).zip(g) {
                    *c = (*c + alpha * sign(*gi)).clamp(o - eps, o + eps).clamp(0.0, 1.0);
                }
            }
        }
    }
    let mut losses: Vec<f64> = best_key.iter().map(|k| k.map_or(f64::NAN, |k| k.1)).collect();
    if zero.iter().any(|&z| z) {
        for (i, z) in zero.iter().enumerate() {
            if *z {
                best.row_mut(i).copy_from_slice(x.row(i));
            }
        }
        let p = oracle.probe(&best, goal, identity, &objective)?;
        for (i, z) in zero.iter().enumerate() {
            if *z {
                losses[i] = p.values[i];
            }
        }
    }
    let cand = Candidate {
        images: best,
        iterations: cfg.iterations * cfg.restarts,
        losses,
        zero_gradient: zero,
    };
    finish(model, x, goal, cand, cfg, &mut rng_for(cfg.seed, EVAL_STREAM))
}

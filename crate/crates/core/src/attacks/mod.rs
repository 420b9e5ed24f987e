//! First-order attacks against defended models.
//!
//! Every attack talks to the model through a [`GradientOracle`], which
//! decides how the input gradient is obtained: through the true backward
//! pass, through registered surrogates (BPDA), averaged over fresh draws of
//! the defense's randomness (EOT), or exactly over an enumerable draw set.
//! The forward pass is always the real defense.

mod l2;
mod linf;
mod optim;
mod oracle;

use advlab_autodiff::Tensor;
use rand::RngCore;
use serde::{Deserialize, Serialize};

pub use l2::{high_confidence_attack, lagrangian_l2, lagrangian_search, BoxParam, Parameterization, SearchResult};
pub use linf::{fgsm, pgd_linf};
pub use optim::Adam;
pub use oracle::{GradientOracle, Probe};

use crate::defenses::DefendedModel;
use crate::error::{invalid, Error, Result};
use crate::metrics;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm,
    PgdLinf,
    LagrangianL2,
    BpdaPgd,
    EotPgd,
    Reparam,
    HighConfidenceL2,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::PgdLinf => "pgd_linf",
            AttackKind::LagrangianL2 => "lagrangian_l2",
            AttackKind::BpdaPgd => "bpda_pgd",
            AttackKind::EotPgd => "eot_pgd",
            AttackKind::Reparam => "reparam",
            AttackKind::HighConfidenceL2 => "high_confidence_l2",
        }
    }

    /// Whether the attack is confined to an ℓ∞ ball of radius ε.
    pub fn is_linf(self) -> bool {
        matches!(
            self,
            AttackKind::Fgsm | AttackKind::PgdLinf | AttackKind::BpdaPgd | AttackKind::EotPgd
        )
    }
}

/// How gradients of a randomized defense are estimated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Eot {
    /// One fresh draw per gradient step.
    #[default]
    Single,
    /// One draw for the whole attack, as if the defense were deterministic.
    Frozen,
    /// Mean over this many fresh draws per step.
    Samples(usize),
    /// Exact expectation over the defense's finite draw set.
    Enumerate,
}

/// Objective ascended by the ℓ∞ attacks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PgdLoss {
    #[default]
    CrossEntropy,
    /// `min(−margin, κ)` on logits, with κ the configured confidence.
    Margin,
}

/// `required` adversarial outcomes out of `trials` independent evaluations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuccessCriterion {
    pub required: usize,
    pub trials: usize,
}

impl SuccessCriterion {
    pub const SINGLE: SuccessCriterion = SuccessCriterion { required: 1, trials: 1 };
    pub const TEN_OF_TEN: SuccessCriterion = SuccessCriterion { required: 10, trials: 10 };

    pub fn validate(&self) -> Result<()> {
        if self.required == 0 || self.required > self.trials {
            return Err(invalid(format!(
                "success criterion needs 1 ≤ required ≤ trials, got {}-of-{}",
                self.required, self.trials
            )));
        }
        Ok(())
    }
}

impl Default for SuccessCriterion {
    fn default() -> Self {
        Self::SINGLE
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// ℓ∞ radius in `[0,1]` pixel units.
    pub epsilon: f64,
    pub iterations: usize,
    /// PGD step; `None` means ε/4.
    pub step_size: Option<f64>,
    pub random_start: bool,
    pub restarts: usize,
    pub targeted: bool,
    /// Use registered backward surrogates for non-differentiable stages.
    pub bpda: bool,
    pub eot: Eot,
    pub loss: PgdLoss,
    /// Required logit margin κ for the ℓ₂ attacks; the cap of the margin
    /// loss for the ℓ∞ ones.
    pub confidence: f64,
    pub initial_const: f64,
    pub binary_search_steps: usize,
    /// Adam learning rate of the ℓ₂ attacks.
    pub learning_rate: f64,
    /// Success also requires `‖δ‖₂/√N` at most this.
    pub rms_budget: Option<f64>,
    pub success: SuccessCriterion,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            kind: AttackKind::PgdLinf,
            epsilon: 0.3,
            iterations: 100,
            step_size: None,
            random_start: true,
            restarts: 1,
            targeted: false,
            bpda: false,
            eot: Eot::Single,
            loss: PgdLoss::CrossEntropy,
            confidence: 0.0,
            initial_const: 1.0,
            binary_search_steps: 6,
            learning_rate: 0.05,
            rms_budget: None,
            success: SuccessCriterion::SINGLE,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn new(kind: AttackKind) -> Self {
        let mut cfg = Self {
            kind,
            ..Self::default()
        };
        match kind {
            AttackKind::BpdaPgd => cfg.bpda = true,
            AttackKind::EotPgd => cfg.eot = Eot::Samples(10),
            AttackKind::Fgsm => {
                cfg.iterations = 1;
                cfg.random_start = false;
            }
            _ => {}
        }
        cfg
    }

    pub fn step(&self) -> f64 {
        self.step_size.unwrap_or(self.epsilon / 4.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) {
            return Err(invalid("attack ε must be non-negative"));
        }
        if self.iterations == 0 {
            return Err(invalid("attack needs at least one iteration"));
        }
        if self.restarts == 0 {
            return Err(invalid("attack needs at least one restart"));
        }
        if !(self.confidence >= 0.0) {
            return Err(invalid("confidence κ must be non-negative"));
        }
        if let Eot::Samples(0) = self.eot {
            return Err(invalid("eot needs at least one sample"));
        }
        self.success.validate()
    }
}

/// What the attacker wants for each example.
#[derive(Clone, Debug)]
pub struct Goal {
    pub labels: Vec<usize>,
    pub targets: Option<Vec<usize>>,
}

impl Goal {
    pub fn untargeted(labels: &[usize]) -> Self {
        Self {
            labels: labels.to_vec(),
            targets: None,
        }
    }

    pub fn targeted(labels: &[usize], targets: &[usize]) -> Result<Self> {
        if labels.len() != targets.len() {
            return Err(Error::Shape(format!("{} labels but {} targets", labels.len(), targets.len())));
        }
        if labels.iter().zip(targets).any(|(l, t)| l == t) {
            return Err(invalid("a target class equals the true label"));
        }
        Ok(Self {
            labels: labels.to_vec(),
            targets: Some(targets.to_vec()),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn is_targeted(&self) -> bool {
        self.targets.is_some()
    }

    /// Class the margin and loss refer to: the target, else the true label.
    pub fn classes(&self) -> &[usize] {
        self.targets.as_deref().unwrap_or(&self.labels)
    }

    pub fn achieved(&self, i: usize, prediction: usize) -> bool {
        match &self.targets {
            Some(t) => prediction == t[i],
            None => prediction != self.labels[i],
        }
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            targets: self.targets.as_ref().map(|t| idx.iter().map(|&i| t[i]).collect()),
        }
    }
}

/// Per-example result of an attack.
#[derive(Clone, Debug)]
pub struct AttackOutcome {
    /// Adversarial image, per-example shape.
    pub adversarial: Tensor,
    pub label: usize,
    pub target: Option<usize>,
    pub success: bool,
    /// Trials (of the success criterion) in which the goal was reached.
    pub adversarial_trials: usize,
    pub linf: f64,
    pub l2: f64,
    pub l2_raw: f64,
    pub rms: f64,
    pub iterations: usize,
    pub final_loss: f64,
    /// The input gradient was identically zero at every step.
    pub zero_gradient: bool,
}

/// Candidate adversarial batch before success evaluation.
pub(crate) struct Candidate {
    pub images: Tensor,
    pub iterations: usize,
    pub losses: Vec<f64>,
    pub zero_gradient: Vec<bool>,
}

/// Evaluates candidates against the true defended forward pass under the
/// configured criterion and assembles outcomes.
pub(crate) fn finish(
    model: &DefendedModel,
    x: &Tensor,
    goal: &Goal,
    cand: Candidate,
    cfg: &AttackConfig,
    rng: &mut dyn RngCore,
) -> Result<Vec<AttackOutcome>> {
    let required = if model.is_stochastic() { cfg.success.required } else { 1 };
    let all_hits = goal_hits(model, &cand.images, goal, cfg.success, rng)?;
    let per_example = &x.shape()[1..];
    (0..goal.len())
        .map(|i| {
            let a = cand.images.row(i);
            let o = x.row(i);
            let hits = all_hits[i];
            let rms = metrics::rms(o, a)?;
            let within = cfg.rms_budget.is_none_or(|b| rms <= b + 1e-12);
            Ok(AttackOutcome {
                adversarial: Tensor::new(per_example.to_vec(), a.to_vec())?,
                label: goal.labels[i],
                target: goal.targets.as_ref().map(|t| t[i]),
                success: hits >= required && within,
                adversarial_trials: hits,
                linf: metrics::linf(o, a)?,
                l2: metrics::l2(o, a)?,
                l2_raw: metrics::l2_raw(o, a)?,
                rms,
                iterations: cand.iterations,
                final_loss: cand.losses[i],
                zero_gradient: cand.zero_gradient[i],
            })
        })
        .collect()
}

/// Per example, the number of trials of `criterion` in which `images`
/// reach the goal. Deterministic models are judged once.
pub fn goal_hits(
    model: &DefendedModel,
    images: &Tensor,
    goal: &Goal,
    criterion: SuccessCriterion,
    rng: &mut dyn RngCore,
) -> Result<Vec<usize>> {
    let trials = if model.is_stochastic() { criterion.trials } else { 1 };
    let preds = model.classify_trials(images, trials, rng)?;
    Ok((0..goal.len())
        .map(|i| preds.iter().filter(|p| goal.achieved(i, p[i])).count())
        .collect())
}

/// Whether `images` meet `criterion` for the goal, per example.
pub fn judge(
    model: &DefendedModel,
    images: &Tensor,
    goal: &Goal,
    criterion: SuccessCriterion,
    rng: &mut dyn RngCore,
) -> Result<Vec<bool>> {
    let required = if model.is_stochastic() { criterion.required } else { 1 };
    Ok(goal_hits(model, images, goal, criterion, rng)?
        .into_iter()
        .map(|h| h >= required)
        .collect())
}

/// Runs an attack kind that only needs the defended model.
pub fn run_attack(model: &DefendedModel, x: &Tensor, goal: &Goal, cfg: &AttackConfig) -> Result<Vec<AttackOutcome>> {
    match cfg.kind {
        AttackKind::Fgsm => fgsm(model, x, goal, cfg),
        AttackKind::PgdLinf | AttackKind::BpdaPgd | AttackKind::EotPgd => pgd_linf(model, x, goal, cfg),
        AttackKind::LagrangianL2 => lagrangian_l2(model, x, goal, cfg),
        AttackKind::HighConfidenceL2 => high_confidence_attack(model, x, goal, cfg),
        AttackKind::Reparam => Err(invalid("the reparameterization attack needs a decoder")),
    }
}

/// Stacks per-example adversarial images back into a batch.
pub fn stack_adversarial(outcomes: &[AttackOutcome]) -> Result<Tensor> {
    let items: Vec<Tensor> = outcomes.iter().map(|o| o.adversarial.clone()).collect();
    Ok(Tensor::stack(&items)?)
}

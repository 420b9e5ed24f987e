//! Checks for the behaviours that give away obfuscated or masked gradients.
//!
//! Each check runs attacks configured like the base [`AttackConfig`] (so the
//! same BPDA/EOT settings apply throughout) and records the numbers behind
//! its verdict. "Success rate" always counts an image as broken when it is
//! misclassified before the attack, so rates are comparable across checks.

use std::collections::BTreeMap;

use advlab_autodiff::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{fgsm, judge, pgd_linf, AttackConfig, AttackKind, AttackOutcome, Goal};
use crate::data::LabeledDataset;
use crate::defenses::DefendedModel;
use crate::error::{invalid, Error, Result};
use crate::seeds::rng_for;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    OneStepVsIterative,
    BlackboxTransfer,
    Unbounded,
    RandomSampling,
    Monotonicity,
}

impl Check {
    pub const ALL: [Check; 5] = [
        Check::OneStepVsIterative,
        Check::BlackboxTransfer,
        Check::Unbounded,
        Check::RandomSampling,
        Check::Monotonicity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Check::OneStepVsIterative => "one_step_vs_iterative",
            Check::BlackboxTransfer => "blackbox_transfer",
            Check::Unbounded => "unbounded",
            Check::RandomSampling => "random_sampling",
            Check::Monotonicity => "monotonicity",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub check: Check,
    pub measured: BTreeMap<String, f64>,
    pub triggered: bool,
    pub narrative: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub checks: Vec<CheckRecord>,
    /// Any check triggered.
    pub obfuscated: bool,
}

impl DiagnosticReport {
    pub fn triggered(&self) -> Vec<Check> {
        self.checks.iter().filter(|c| c.triggered).map(|c| c.check).collect()
    }

    pub fn get(&self, check: Check) -> Option<&CheckRecord> {
        self.checks.iter().find(|c| c.check == check)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticConfig {
    pub epsilon: f64,
    pub grid: Vec<f64>,
    /// Template for every attack: iterations, BPDA, EOT, success criterion.
    pub attack: AttackConfig,
    /// Uniform samples per image for the random-sampling check.
    pub samples: usize,
    /// Images examined by the random-sampling check.
    pub sample_images: usize,
    /// Rate differences up to this are treated as noise.
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for DiagnosticConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.3,
            grid: vec![0.05, 0.1, 0.15, 0.2, 0.25, 0.3],
            attack: AttackConfig::default(),
            samples: 100_000,
            sample_images: 100,
            tolerance: 0.02,
            seed: 0,
        }
    }
}

/// Attack success bookkeeping over one dataset.
struct Sweep {
    outcomes: Vec<AttackOutcome>,
    broken: Vec<bool>,
}

impl Sweep {
    fn rate(&self) -> f64 {
        self.broken.iter().filter(|&&b| b).count() as f64 / self.broken.len() as f64
    }

    fn zero_gradient(&self) -> f64 {
        self.outcomes.iter().filter(|o| o.zero_gradient).count() as f64 / self.outcomes.len() as f64
    }
}

fn check_nonempty(data: &LabeledDataset) -> Result<Goal> {
    if data.is_empty() {
        return Err(Error::EmptyEvaluationSet);
    }
    Ok(Goal::untargeted(&data.labels))
}

fn attack_config(base: &AttackConfig, kind: AttackKind, epsilon: f64, seed: u64) -> AttackConfig {
    let mut cfg = base.clone();
    cfg.kind = kind;
    cfg.epsilon = epsilon;
    cfg.seed = seed;
    if kind == AttackKind::Fgsm {
        cfg.iterations = 1;
        cfg.random_start = false;
    }
    cfg
}

/// Images misclassified (under the success criterion) before any attack.
fn clean_broken(model: &DefendedModel, data: &LabeledDataset, goal: &Goal, cfg: &AttackConfig) -> Result<Vec<bool>> {
    judge(model, &data.images, goal, cfg.success, &mut rng_for(cfg.seed, 91))
}

fn sweep(
    model: &DefendedModel,
    data: &LabeledDataset,
    goal: &Goal,
    clean: &[bool],
    cfg: &AttackConfig,
) -> Result<Sweep> {
    let outcomes = match cfg.kind {
        AttackKind::Fgsm => fgsm(model, &data.images, goal, cfg)?,
        _ => pgd_linf(model, &data.images, goal, cfg)?,
    };
    let broken = outcomes.iter().zip(clean).map(|(o, &c)| c || o.success).collect();
    Ok(Sweep { outcomes, broken })
}

fn record(check: Check, measured: &[(&str, f64)], triggered: bool, narrative: String) -> CheckRecord {
    CheckRecord {
        check,
        measured: measured.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        triggered,
        narrative,
    }
}

/// Triggered iff FGSM beats PGD at the same ε by more than the tolerance.
pub fn check_one_step_vs_iterative(
    model: &DefendedModel,
    data: &LabeledDataset,
    cfg: &DiagnosticConfig,
) -> Result<CheckRecord> {
    let goal = check_nonempty(data)?;
    let seed = rng_for(cfg.seed, 1).random();
    let clean = clean_broken(model, data, &goal, &cfg.attack)?;
    let one = sweep(model, data, &goal, &clean, &attack_config(&cfg.attack, AttackKind::Fgsm, cfg.epsilon, seed))?;
    let many = sweep(model, data, &goal, &clean, &attack_config(&cfg.attack, AttackKind::PgdLinf, cfg.epsilon, seed))?;
    let (f, p) = (one.rate(), many.rate());
    let triggered = f > p + cfg.tolerance;
    Ok(record(
        Check::OneStepVsIterative,
        &[
            ("epsilon", cfg.epsilon),
            ("fgsm_success", f),
            ("pgd_success", p),
            ("fgsm_zero_gradient", one.zero_gradient()),
            ("pgd_zero_gradient", many.zero_gradient()),
        ],
        triggered,
        format!("at ε = {}: fgsm {:.3}, pgd {:.3}", cfg.epsilon, f, p),
    ))
}

/// Triggered iff PGD examples crafted on `surrogate` break `model` more
/// often than white-box PGD on `model` itself.
pub fn check_blackbox_transfer(
    model: &DefendedModel,
    surrogate: &DefendedModel,
    data: &LabeledDataset,
    cfg: &DiagnosticConfig,
) -> Result<CheckRecord> {
    let goal = check_nonempty(data)?;
    let seed = rng_for(cfg.seed, 2).random();
    let clean = clean_broken(model, data, &goal, &cfg.attack)?;
    let white_cfg = attack_config(&cfg.attack, AttackKind::PgdLinf, cfg.epsilon, seed);
    let white = sweep(model, data, &goal, &clean, &white_cfg)?;
    let mut source_cfg = AttackConfig::new(AttackKind::PgdLinf);
    source_cfg.epsilon = cfg.epsilon;
    source_cfg.iterations = cfg.attack.iterations;
    source_cfg.seed = seed;
    let crafted = pgd_linf(surrogate, &data.images, &goal, &source_cfg)?;
    let items: Vec<Tensor> = crafted.iter().map(|o| o.adversarial.clone()).collect();
    let moved = judge(model, &Tensor::stack(&items)?, &goal, cfg.attack.success, &mut rng_for(seed, 3))?;
    let transfer = moved.iter().zip(&clean).filter(|(m, c)| **m || **c).count() as f64 / data.len() as f64;
    let w = white.rate();
    let triggered = transfer > w + cfg.tolerance;
    Ok(record(
        Check::BlackboxTransfer,
        &[("epsilon", cfg.epsilon), ("transfer_success", transfer), ("whitebox_success", w)],
        triggered,
        format!("at ε = {}: transfer {:.3}, white-box {:.3}", cfg.epsilon, transfer, w),
    ))
}

/// PGD over the whole pixel box; triggered iff success stays below 100%.
pub fn check_unbounded(model: &DefendedModel, data: &LabeledDataset, cfg: &DiagnosticConfig) -> Result<CheckRecord> {
    let goal = check_nonempty(data)?;
    let seed = rng_for(cfg.seed, 4).random();
    let clean = clean_broken(model, data, &goal, &cfg.attack)?;
    let mut acfg = attack_config(&cfg.attack, AttackKind::PgdLinf, 1.0, seed);
    if acfg.step_size.is_none() {
        acfg.step_size = Some(0.1);
    }
    let s = sweep(model, data, &goal, &clean, &acfg)?;
    let r = s.rate();
    Ok(record(
        Check::Unbounded,
        &[("success", r), ("zero_gradient", s.zero_gradient())],
        r < 1.0,
        format!("at ε = 1: success {:.3}", r),
    ))
}

/// Uniform sampling in the ε-ball around images the gradient attack did not
/// break; triggered iff sampling breaks any of them.
pub fn check_random_sampling(model: &DefendedModel, data: &LabeledDataset, cfg: &DiagnosticConfig) -> Result<CheckRecord> {
    let goal = check_nonempty(data)?;
    let seed: u64 = rng_for(cfg.seed, 5).random();
    let clean = clean_broken(model, data, &goal, &cfg.attack)?;
    let s = sweep(model, data, &goal, &clean, &attack_config(&cfg.attack, AttackKind::PgdLinf, cfg.epsilon, seed))?;
    let mut survivors: Vec<usize> = (0..data.len()).filter(|&i| !s.broken[i]).collect();
    let mut rng = rng_for(seed, 6);
    survivors.shuffle(&mut rng);
    survivors.truncate(cfg.sample_images);
    survivors.sort_unstable();

    const CHUNK: usize = 500;
    let mut found = 0usize;
    let mut drawn = 0usize;
    let eps = cfg.epsilon;
    for &i in &survivors {
        let x = data.images.select_rows(&[i]);
        let g1 = goal.subset(&[i]);
        let mut left = cfg.samples;
        while left > 0 && eps > 0.0 {
            let b = left.min(CHUNK);
            left -= b;
            drawn += b;
            let mut shape = data.images.shape().to_vec();
            shape[0] = b;
            let mut batch = Tensor::zeros(&shape);
            for r in 0..b {
                for (v, o) in batch.row_mut(r).iter_mut().zip(x.row(0)) {
                    *v = (o + rng.random_range(-eps..=eps)).clamp(0.0, 1.0);
                }
            }
            let draw = model.sample_draw(&mut rng);
            let preds = model.classify(&batch, &draw)?;
            let candidate = preds.iter().position(|&p| g1.achieved(0, p));
            if let Some(r) = candidate {
                let confirmed = judge(model, &batch.select_rows(&[r]), &g1, cfg.attack.success, &mut rng)?;
                if confirmed[0] {
                    found += 1;
                    break;
                }
            }
        }
    }
    let checked = survivors.len();
    let rate = if checked == 0 { 0.0 } else { found as f64 / checked as f64 };
    Ok(record(
        Check::RandomSampling,
        &[
            ("epsilon", eps),
            ("images_checked", checked as f64),
            ("images_found", found as f64),
            ("samples_drawn", drawn as f64),
            ("discovery_rate", rate),
        ],
        found > 0,
        format!("sampling broke {found} of {checked} images that PGD did not"),
    ))
}

/// Success over an increasing ε grid; triggered iff success drops by more
/// than the tolerance, or the whole grid adds no more than the tolerance
/// while success is below 100%.
pub fn check_monotonicity(model: &DefendedModel, data: &LabeledDataset, cfg: &DiagnosticConfig) -> Result<CheckRecord> {
    let goal = check_nonempty(data)?;
    if cfg.grid.len() < 2 {
        return Err(invalid("grid must have ≥ 2 points"));
    }
    let mut grid = cfg.grid.clone();
    grid.sort_by(f64::total_cmp);
    let seed = rng_for(cfg.seed, 7).random();
    let clean = clean_broken(model, data, &goal, &cfg.attack)?;
    let rates = grid
        .iter()
        .map(|&e| Ok(sweep(model, data, &goal, &clean, &attack_config(&cfg.attack, AttackKind::PgdLinf, e, seed))?.rate()))
        .collect::<Result<Vec<f64>>>()?;
    let mut drop = 0.0f64;
    for j in 1..rates.len() {
        let best_before = rates[..j].iter().cloned().fold(f64::MIN, f64::max);
        drop = drop.max(best_before - rates[j]);
    }
    let gain = rates[rates.len() - 1] - rates[0];
    let last = rates[rates.len() - 1];
    let stalled = gain <= cfg.tolerance && last < 1.0;
    let triggered = drop > cfg.tolerance || stalled;
    let mut measured: Vec<(String, f64)> = grid
        .iter()
        .zip(&rates)
        .map(|(e, r)| (format!("success@{e}"), *r))
        .collect();
    measured.push(("max_drop".into(), drop));
    measured.push(("gain".into(), gain));
    Ok(CheckRecord {
        check: Check::Monotonicity,
        measured: measured.into_iter().collect(),
        triggered,
        narrative: format!(
            "success {:?} over ε {:?}; largest drop {:.3}, total gain {:.3}",
            rates.iter().map(|r| (r * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            grid,
            drop,
            gain
        ),
    })
}

/// Runs all five checks. `surrogate` is an undefended model used as the
/// source of transfer attacks.
pub fn diagnose(
    model: &DefendedModel,
    surrogate: &DefendedModel,
    data: &LabeledDataset,
    cfg: &DiagnosticConfig,
) -> Result<DiagnosticReport> {
    if data.is_empty() {
        return Err(Error::EmptyEvaluationSet);
    }
    cfg.attack.validate()?;
    let checks = vec![
        check_one_step_vs_iterative(model, data, cfg)?,
        check_blackbox_transfer(model, surrogate, data, cfg)?,
        check_unbounded(model, data, cfg)?,
        check_random_sampling(model, data, cfg)?,
        check_monotonicity(model, data, cfg)?,
    ];
    let obfuscated = checks.iter().any(|c| c.triggered);
    Ok(DiagnosticReport { checks, obfuscated })
}

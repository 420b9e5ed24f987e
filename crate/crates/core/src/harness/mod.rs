//! Config-driven evaluation: every configured attack against every
//! configured defense, with per-image records and aggregate reports.

pub mod config;
pub mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use advlab_autodiff::Tensor;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{
    Architecture, DatasetSpec, DefenseSpec, EvaluationMode, EvaluationSpec, HarnessConfig, LidSpec, ModelSpec,
    OutputSpec,
};
pub use report::{
    BestImage, BestPerImageSummary, CellSummary, DefenseReport, DistortionStats, EvaluationReport, ImageRecord,
    Runtime, SCHEMA_VERSION,
};

use crate::attacks::{goal_hits, run_attack, AttackConfig, AttackKind, Goal, SuccessCriterion};
use crate::checkpoint::{CheckpointError, Metadata};
use crate::data::{desk_digits, load_idx, LabeledDataset, Split};
use crate::defenses::{DefendedModel, DefendedModelFront, InputStage};
use crate::diagnostics::{diagnose, DiagnosticConfig};
use crate::error::{Error, Result};
use crate::lid::{self, DetectorReport, LidDetector};
use crate::metrics::best_per_image;
use crate::model::{train_with, AdversarialTraining, Classifier, InputFront, TrainConfig};
use crate::seeds::{derive_seed, rng_for};

const TARGET_STREAM: u64 = 11;
const CLEAN_STREAM: u64 = 12;
const ATTACK_STREAM: u64 = 13;
const JUDGE_STREAM: u64 = 14;
const DIAGNOSE_STREAM: u64 = 15;
const TRAIN_STREAM: u64 = 16;
const LID_STREAM: u64 = 17;

/// Train split (if available) and test split.
pub struct Data {
    pub train: Option<LabeledDataset>,
    pub test: LabeledDataset,
}

pub fn load_data(spec: &DatasetSpec) -> Result<Data> {
    match spec {
        DatasetSpec::Desk { seed } => {
            let (train, test) = desk_digits(*seed)?;
            Ok(Data {
                train: Some(train),
                test,
            })
        }
        DatasetSpec::Idx {
            test_images,
            test_labels,
            train_images,
            train_labels,
        } => {
            let train = match (train_images, train_labels) {
                (Some(i), Some(l)) => Some(load_idx(i, l, Split::Train)?),
                (None, None) => None,
                _ => {
                    return Err(Error::Config(
                        "dataset: train_images and train_labels must be given together".into(),
                    ))
                }
            };
            Ok(Data {
                train,
                test: load_idx(test_images, test_labels, Split::Test)?,
            })
        }
    }
}

pub fn build_stages(spec: &DefenseSpec) -> Result<Vec<Arc<dyn InputStage>>> {
    let mut out = Vec::new();
    for p in &spec.stages {
        if let Some(s) = p.build()? {
            out.push(s);
        }
    }
    Ok(out)
}

/// Where a classifier came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Loaded(PathBuf),
    Trained,
}

/// Resolves, loads or trains the classifiers behind defenses, sharing one
/// classifier between defenses with the same stages.
pub struct ModelCache<'a> {
    cfg: &'a HarnessConfig,
    data: &'a Data,
    cache: BTreeMap<String, (Arc<Classifier>, Provenance)>,
}

impl<'a> ModelCache<'a> {
    pub fn new(cfg: &'a HarnessConfig, data: &'a Data) -> Self {
        Self {
            cfg,
            data,
            cache: BTreeMap::new(),
        }
    }

    /// Checkpoint path for the classifier of `defense`, if one is configured.
    pub fn checkpoint_path(&self, defense: &DefenseSpec) -> Option<PathBuf> {
        defense.checkpoint.clone().or_else(|| {
            let stage_free = defense.stages.iter().all(|p| matches!(p, crate::defenses::Preprocessor::None));
            if stage_free {
                self.cfg.model.checkpoint.clone()
            } else {
                None
            }
        })
    }

    pub fn classifier(&mut self, defense: &DefenseSpec) -> Result<(Arc<Classifier>, Provenance)> {
        let path = self.checkpoint_path(defense);
        let key = format!(
            "{}|{}|{:?}|{:?}",
            serde_json::to_string(&defense.stages).expect("stages serialize"),
            defense.train_surrogates,
            self.adversarial(defense),
            path
        );
        if let Some(hit) = self.cache.get(&key) {
            return Ok(hit.clone());
        }
        let resolved = match &path {
            Some(p) if p.exists() => (Arc::new(Classifier::load(p)?), Provenance::Loaded(p.clone())),
            _ if self.cfg.model.train_missing => {
                let m = self.train(defense)?;
                if let Some(p) = &path {
                    m.save(p, self.metadata(defense))?;
                }
                (Arc::new(m), Provenance::Trained)
            }
            Some(p) => return Err(CheckpointError::Missing(p.clone()).into()),
            None => {
                return Err(Error::Config(format!(
                    "defense `{}` has no checkpoint and model.train_missing is false",
                    defense.name
                )))
            }
        };
        self.cache.insert(key, resolved.clone());
        Ok(resolved)
    }

    fn adversarial<'s>(&'s self, defense: &'s DefenseSpec) -> Option<&'s AdversarialTraining> {
        defense.adversarial.as_ref().or(self.cfg.model.adversarial.as_ref())
    }

    fn metadata(&self, defense: &DefenseSpec) -> Metadata {
        let adv = self.adversarial(defense);
        Metadata {
            epochs: self.cfg.model.training.epochs,
            seed: self.training_config().seed,
            adversarial: adv.is_some(),
            epsilon: adv.map(|a| a.epsilon),
            extra: Default::default(),
        }
    }

    fn training_config(&self) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.cfg.seed, derive_seed(self.cfg.model.training.seed, TRAIN_STREAM)),
            ..self.cfg.model.training.clone()
        }
    }

    /// Trains a fresh classifier for `defense`, through its stages.
    pub fn train(&self, defense: &DefenseSpec) -> Result<Classifier> {
        let train = self
            .data
            .train
            .as_ref()
            .ok_or_else(|| Error::Config("dataset: training needs train_images and train_labels".into()))?;
        let stages = build_stages(defense)?;
        let mut shape = train.image_shape().to_vec();
        for s in &stages {
            shape = s.output_shape(&shape)?;
        }
        let m = &self.cfg.model;
        let init = match &m.architecture {
            Architecture::Mlp { hidden } => Classifier::mlp(&shape, hidden, train.num_classes, m.init_seed)?,
            Architecture::Cnn => Classifier::cnn(&shape, train.num_classes, m.init_seed)?,
        };
        let front = DefendedModelFront {
            stages,
            surrogates: defense.train_surrogates,
        };
        let front_ref: Option<&dyn InputFront> = if front.stages.is_empty() { None } else { Some(&front) };
        train_with(&init, train, &self.training_config(), front_ref, self.adversarial(defense))
    }

    pub fn defended(&mut self, defense: &DefenseSpec) -> Result<DefendedModel> {
        let (classifier, _) = self.classifier(defense)?;
        DefendedModel::new(
            self.data.test.image_shape().to_vec(),
            build_stages(defense)?,
            classifier,
            defense.sap.clone(),
        )
    }
}

/// The evaluation slice of the test split.
pub fn evaluation_set(spec: &EvaluationSpec, test: &LabeledDataset) -> Result<(LabeledDataset, Vec<usize>)> {
    let end = if spec.samples == 0 {
        test.len()
    } else {
        (spec.offset + spec.samples).min(test.len())
    };
    if spec.offset >= end {
        return Err(Error::EmptyEvaluationSet);
    }
    let idx: Vec<usize> = (spec.offset..end).collect();
    Ok((test.subset(&idx), idx))
}

/// A uniformly random class other than each label.
pub fn random_targets(labels: &[usize], num_classes: usize, seed: u64) -> Result<Vec<usize>> {
    if num_classes < 2 {
        return Err(Error::Invalid("targeted evaluation needs at least two classes".into()));
    }
    let mut rng = rng_for(seed, TARGET_STREAM);
    Ok(labels
        .iter()
        .map(|&l| (l + 1 + rng.random_range(0..num_classes - 1)) % num_classes)
        .collect())
}

/// Trials and required failures for a defense under the evaluation spec.
pub fn criterion_for(model: &DefendedModel, spec: &EvaluationSpec) -> SuccessCriterion {
    if model.is_stochastic() {
        spec.success
    } else {
        SuccessCriterion::SINGLE
    }
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Invalid(format!("worker pool: {e}")))
}

struct Job<'a> {
    defense: &'a str,
    attack: String,
    cfg: AttackConfig,
    seed: u64,
}

/// Attacks the clean-correct images in fixed chunks on the pool; records
/// come back in image order whatever the completion order.
fn attack_defense(
    model: &DefendedModel,
    data: &LabeledDataset,
    indices: &[usize],
    goal: &Goal,
    clean_correct: &[bool],
    job: &Job,
    spec: &EvaluationSpec,
    pool: &rayon::ThreadPool,
) -> Result<Vec<ImageRecord>> {
    let criterion = criterion_for(model, spec);
    let todo: Vec<usize> = (0..data.len()).filter(|&i| clean_correct[i]).collect();
    let chunks: Vec<&[usize]> = todo.chunks(spec.chunk_size).collect();
    let results: Vec<Result<Vec<(usize, ImageRecord)>>> = pool.install(|| {
        chunks
            .par_iter()
            .enumerate()
            .map(|(c, rows)| {
                let seed = derive_seed(job.seed, c as u64);
                let cfg = AttackConfig {
                    success: criterion,
                    targeted: goal.is_targeted(),
                    seed,
                    ..job.cfg.clone()
                };
                let x = data.images.select_rows(rows);
                let g = goal.subset(rows);
                let outcomes = run_attack(model, &x, &g, &cfg)?;
                let correct: Vec<bool> = if g.is_targeted() {
                    let adv = crate::attacks::stack_adversarial(&outcomes)?;
                    let truth = Goal::untargeted(&g.labels);
                    let fooled = goal_hits(model, &adv, &truth, criterion, &mut rng_for(seed, JUDGE_STREAM))?;
                    let trials = if model.is_stochastic() { criterion.trials } else { 1 };
                    fooled.iter().map(|&h| h < trials).collect()
                } else {
                    outcomes.iter().map(|o| !o.success).collect()
                };
                Ok(rows
                    .iter()
                    .zip(outcomes)
                    .zip(correct)
                    .map(|((&i, o), correct)| {
                        (
                            i,
                            ImageRecord {
                                defense: job.defense.to_string(),
                                attack: job.attack.clone(),
                                index: indices[i],
                                label: o.label,
                                target: o.target,
                                clean_correct: true,
                                attacked: true,
                                success: o.success,
                                correct,
                                adversarial_trials: o.adversarial_trials,
                                linf: o.linf,
                                l2: o.l2,
                                l2_raw: o.l2_raw,
                                rms: o.rms,
                                zero_gradient: o.zero_gradient,
                            },
                        )
                    })
                    .collect())
            })
            .collect()
    });
    let mut slots: Vec<Option<ImageRecord>> = vec![None; data.len()];
    for r in results {
        for (i, rec) in r? {
            slots[i] = Some(rec);
        }
    }
    Ok(slots
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            s.unwrap_or_else(|| ImageRecord {
                defense: job.defense.to_string(),
                attack: job.attack.clone(),
                index: indices[i],
                label: data.labels[i],
                target: goal.targets.as_ref().map(|t| t[i]),
                clean_correct: false,
                attacked: false,
                success: false,
                correct: false,
                adversarial_trials: 0,
                linf: 0.0,
                l2: 0.0,
                l2_raw: 0.0,
                rms: 0.0,
                zero_gradient: false,
            })
        })
        .collect())
}

fn summarize_cell(attack: &str, records: &[ImageRecord]) -> CellSummary {
    let n = records.len() as f64;
    let rate = |f: fn(&ImageRecord) -> bool| records.iter().filter(|r| f(r)).count() as f64 / n;
    let refs: Vec<&ImageRecord> = records.iter().collect();
    CellSummary {
        attack: attack.to_string(),
        images: records.len(),
        accuracy: rate(|r| r.correct),
        success_rate: rate(|r| r.success),
        clean_misclassified_rate: rate(|r| !r.clean_correct),
        zero_gradient_rate: rate(|r| r.zero_gradient),
        distortion: DistortionStats::of(&refs),
    }
}

fn best_summary(labels: &[String], per_attack: &[Vec<ImageRecord>]) -> Result<BestPerImageSummary> {
    let matrix: Vec<Vec<f64>> = per_attack
        .iter()
        .map(|rs| rs.iter().map(|r| if r.correct { 1.0 } else { 0.0 }).collect())
        .collect();
    let agg = best_per_image(&matrix)?;
    let images = (0..matrix[0].len())
        .map(|i| {
            let attack = per_attack
                .iter()
                .zip(labels)
                .filter(|(rs, _)| rs[i].success)
                .min_by(|a, b| a.0[i].rms.total_cmp(&b.0[i].rms))
                .map(|(_, l)| l.clone());
            BestImage {
                index: per_attack[0][i].index,
                correct: agg.per_image[i] > 0.5,
                attack,
            }
        })
        .collect();
    Ok(BestPerImageSummary {
        accuracy: agg.mean_of_min,
        strongest_attack_accuracy: agg.min_of_mean,
        strongest_attack: labels[agg.best_attack].clone(),
        images,
    })
}

/// Runs the full attack × defense matrix.
pub fn evaluate(cfg: &HarnessConfig) -> Result<EvaluationReport> {
    cfg.validate()?;
    if let Some((i, _)) = cfg.attacks.iter().enumerate().find(|(_, a)| a.kind == AttackKind::Reparam) {
        return Err(Error::Config(format!(
            "attacks[{i}]: the reparameterization attack needs a decoder and is not available in the harness"
        )));
    }
    let start = Instant::now();
    let data = load_data(&cfg.dataset)?;
    let (eval, indices) = evaluation_set(&cfg.evaluation, &data.test)?;
    let goal = match cfg.evaluation.mode {
        EvaluationMode::Untargeted => Goal::untargeted(&eval.labels),
        EvaluationMode::TargetedRandom => {
            Goal::targeted(&eval.labels, &random_targets(&eval.labels, eval.num_classes, cfg.seed)?)?
        }
    };
    let pool = pool(cfg.evaluation.workers)?;
    let mut models = ModelCache::new(cfg, &data);
    let labels: Vec<String> = (0..cfg.attacks.len()).map(|i| cfg.attack_label(i)).collect();

    let mut defenses = Vec::new();
    let mut records = Vec::new();
    for (d, spec) in cfg.defenses.iter().enumerate() {
        let model = models.defended(spec)?;
        let criterion = criterion_for(&model, &cfg.evaluation);
        let trials = if model.is_stochastic() { criterion.trials } else { 1 };
        let mut rng = rng_for(derive_seed(cfg.seed, d as u64), CLEAN_STREAM);
        let preds = model.classify_trials(&eval.images, trials, &mut rng)?;
        let clean_correct: Vec<bool> = (0..eval.len())
            .map(|i| preds.iter().any(|p| p[i] == eval.labels[i]))
            .collect();
        let clean_accuracy = clean_correct.iter().filter(|&&c| c).count() as f64 / eval.len() as f64;

        let mut per_attack = Vec::new();
        for (a, attack) in cfg.attacks.iter().enumerate() {
            let job = Job {
                defense: &spec.name,
                attack: labels[a].clone(),
                cfg: attack.clone(),
                seed: derive_seed(derive_seed(cfg.seed, attack.seed), ATTACK_STREAM + ((d as u64) << 20) + a as u64),
            };
            per_attack.push(attack_defense(
                &model,
                &eval,
                &indices,
                &goal,
                &clean_correct,
                &job,
                &cfg.evaluation,
                &pool,
            )?);
        }
        let cells = per_attack.iter().zip(&labels).map(|(rs, l)| summarize_cell(l, rs)).collect();
        let best = if per_attack.is_empty() {
            None
        } else {
            Some(best_summary(&labels, &per_attack)?)
        };
        let diagnostics = if cfg.evaluation.diagnose {
            let (base, _) = models.classifier(&DefenseSpec::none())?;
            let surrogate = DefendedModel::undefended(base);
            let mut dcfg = cfg.diagnostics.clone().unwrap_or_default();
            dcfg.attack.success = criterion;
            dcfg.seed = derive_seed(derive_seed(cfg.seed, dcfg.seed), DIAGNOSE_STREAM + d as u64);
            Some(diagnose(&model, &surrogate, &eval, &dcfg)?)
        } else {
            None
        };
        defenses.push(DefenseReport {
            name: spec.name.clone(),
            description: model.describe(),
            stochastic: model.is_stochastic(),
            trials,
            required: if model.is_stochastic() { criterion.required } else { 1 },
            images: eval.len(),
            clean_accuracy,
            cells,
            best_per_image: best,
            diagnostics,
        });
        records.extend(per_attack.into_iter().flatten());
    }
    let report = EvaluationReport {
        schema_version: SCHEMA_VERSION,
        config: cfg.clone(),
        defenses,
        records,
        runtime: Runtime {
            seconds: start.elapsed().as_secs_f64(),
            workers: pool.current_num_threads(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        },
    };
    if let Some(dir) = &cfg.output.dir {
        report.write(dir)?;
    }
    Ok(report)
}

/// Diagnostics only, for every configured defense.
pub fn diagnose_all(cfg: &HarnessConfig) -> Result<Vec<(String, crate::diagnostics::DiagnosticReport)>> {
    let mut cfg = cfg.clone();
    cfg.attacks.clear();
    cfg.evaluation.diagnose = true;
    cfg.output.dir = None;
    if cfg.diagnostics.is_none() {
        cfg.diagnostics = Some(DiagnosticConfig::default());
    }
    let report = evaluate(&cfg)?;
    Ok(report
        .defenses
        .into_iter()
        .map(|d| (d.name, d.diagnostics.expect("diagnose set")))
        .collect())
}

/// Trains (or retrains) the classifier of one defense and saves it.
pub fn train_classifier(cfg: &HarnessConfig, defense: &DefenseSpec, out: Option<&Path>) -> Result<(Classifier, f64)> {
    let data = load_data(&cfg.dataset)?;
    let cache = ModelCache::new(cfg, &data);
    let m = cache.train(defense)?;
    let stages = build_stages(defense)?;
    let dm = DefendedModel::new(data.test.image_shape().to_vec(), stages, Arc::new(m.clone()), defense.sap.clone())?;
    let acc = dm.accuracy(&data.test.images, &data.test.labels, 1, &mut rng_for(cfg.seed, CLEAN_STREAM))?;
    if let Some(p) = out.map(Path::to_path_buf).or_else(|| cache.checkpoint_path(defense)) {
        m.save(&p, cache.metadata(defense))?;
    }
    Ok((m, acc))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LidTrainReport {
    pub attack: String,
    pub source_images: usize,
    pub adversarial_examples: usize,
    pub detector: DetectorReport,
}

fn lid_spec(cfg: &HarnessConfig) -> LidSpec {
    cfg.lid.clone().unwrap_or_default()
}

/// Crafts successful adversarial examples from the first training images
/// and trains a LID detector on them against their clean sources.
pub fn lid_train(cfg: &HarnessConfig) -> Result<(LidDetector, LidTrainReport)> {
    cfg.validate()?;
    let spec = lid_spec(cfg);
    let data = load_data(&cfg.dataset)?;
    let train = data
        .train
        .as_ref()
        .ok_or_else(|| Error::Config("dataset: LID training needs the train split".into()))?;
    let mut models = ModelCache::new(cfg, &data);
    let (base, _) = models.classifier(&DefenseSpec::none())?;
    let model = DefendedModel::undefended(base.clone());
    let src = train.take(spec.train_images.min(train.len()));
    let acfg = AttackConfig {
        seed: derive_seed(cfg.seed, derive_seed(spec.attack.seed, LID_STREAM)),
        ..spec.attack.clone()
    };
    let outcomes = run_attack(&model, &src.images, &Goal::untargeted(&src.labels), &acfg)?;
    let hit: Vec<usize> = outcomes.iter().enumerate().filter(|(_, o)| o.success).map(|(i, _)| i).collect();
    if hit.is_empty() {
        return Err(Error::Invalid("the detector attack produced no adversarial examples".into()));
    }
    let clean = src.images.select_rows(&hit);
    let adv = Tensor::stack(&hit.iter().map(|&i| outcomes[i].adversarial.clone()).collect::<Vec<_>>())?;
    let (detector, rep) = lid::train_detector(&base, &clean, &adv, acfg.kind.name(), &spec.detector)?;
    if let Some(p) = &spec.checkpoint {
        detector.save(p, Metadata::default())?;
    }
    Ok((
        detector,
        LidTrainReport {
            attack: acfg.kind.name().to_string(),
            source_images: src.len(),
            adversarial_examples: hit.len(),
            detector: rep,
        },
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LidScoreRow {
    pub attack: String,
    pub adversarial_examples: usize,
    /// Fraction of successful adversarial examples the detector passes.
    pub benign_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LidScoreReport {
    pub images: usize,
    pub clean_benign_rate: f64,
    pub attacks: Vec<LidScoreRow>,
}

/// Benign rates of clean evaluation images and of each configured attack's
/// successful examples, each scored against its source's clean minibatch.
pub fn lid_score(cfg: &HarnessConfig, detector: &LidDetector) -> Result<LidScoreReport> {
    cfg.validate()?;
    let data = load_data(&cfg.dataset)?;
    let (eval, _) = evaluation_set(&cfg.evaluation, &data.test)?;
    let mut models = ModelCache::new(cfg, &data);
    let (base, _) = models.classifier(&DefenseSpec::none())?;
    let model = DefendedModel::undefended(base.clone());
    let probe = &eval.images.select_rows(&[0]);
    let (clean_f, _) = lid::paired_features(&base, &eval.images, probe, detector.k, detector.batch_size)?;
    let clean_scores: Vec<f64> = clean_f.iter().map(|f| detector.score(&f.values)).collect();
    let mut rows = Vec::new();
    for (a, attack) in cfg.attacks.iter().enumerate() {
        let acfg = AttackConfig {
            seed: derive_seed(derive_seed(cfg.seed, attack.seed), ATTACK_STREAM + a as u64),
            ..attack.clone()
        };
        let outcomes = run_attack(&model, &eval.images, &Goal::untargeted(&eval.labels), &acfg)?;
        let hit: Vec<usize> = outcomes.iter().enumerate().filter(|(_, o)| o.success).map(|(i, _)| i).collect();
        let benign_rate = if hit.is_empty() {
            None
        } else {
            // Row j of the adversarial batch pairs with clean row j mod n,
            // so place each example at its source's position.
            let mut adv = eval.images.clone();
            for &i in &hit {
                let row = outcomes[i].adversarial.data().to_vec();
                adv.row_mut(i).copy_from_slice(&row);
            }
            let (_, adv_f) = lid::paired_features(&base, &eval.images, &adv, detector.k, detector.batch_size)?;
            let scores: Vec<f64> = hit.iter().map(|&i| detector.score(&adv_f[i].values)).collect();
            lid::benign_rate(detector, &scores)
        };
        rows.push(LidScoreRow {
            attack: cfg.attack_label(a),
            adversarial_examples: hit.len(),
            benign_rate,
        });
    }
    Ok(LidScoreReport {
        images: eval.len(),
        clean_benign_rate: lid::benign_rate(detector, &clean_scores).unwrap_or(0.0),
        attacks: rows,
    })
}

use std::sync::Arc;

use advlab_autodiff::{NodeId, Tape, Tensor};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::sap::{SapConfig, SapHook};
use super::{Differentiability, Draw, InputStage, SurrogateRegistry};
use crate::error::{invalid, Error, Result};
use crate::model::{argmax_rows, ActivationHook, Classifier, InputFront, Trace};

/// One realization of every random choice a defended model makes.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChainDraw {
    pub stages: Vec<Draw>,
    pub sap: Option<u64>,
}

/// A classifier behind a preprocessing chain, with optional stochastic
/// activation pruning and a registry of backward surrogates.
#[derive(Clone, Debug)]
pub struct DefendedModel {
    pub stages: Vec<Arc<dyn InputStage>>,
    pub classifier: Arc<Classifier>,
    pub sap: Option<SapConfig>,
    pub surrogates: SurrogateRegistry,
    input_shape: Vec<usize>,
}

impl DefendedModel {
    /// `input_shape` is the per-example shape the chain accepts.
    pub fn new(
        input_shape: Vec<usize>,
        stages: Vec<Arc<dyn InputStage>>,
        classifier: Arc<Classifier>,
        sap: Option<SapConfig>,
    ) -> Result<Self> {
        let mut shape = input_shape.clone();
        for s in &stages {
            shape = s.output_shape(&shape)?;
        }
        if shape != classifier.input_shape() {
            return Err(Error::Shape(format!(
                "defense chain produces {shape:?} but the classifier takes {:?}",
                classifier.input_shape()
            )));
        }
        if let Some(s) = &sap {
            s.validate()?;
        }
        let surrogates = SurrogateRegistry::defaults(&stages);
        Ok(Self {
            stages,
            classifier,
            sap,
            surrogates,
            input_shape,
        })
    }

    pub fn undefended(classifier: Arc<Classifier>) -> Self {
        let input_shape = classifier.input_shape().to_vec();
        Self::new(input_shape, vec![], classifier, None).expect("empty chain matches")
    }

    pub fn with_surrogates(mut self, surrogates: SurrogateRegistry) -> Self {
        self.surrogates = surrogates;
        self
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.num_classes
    }

    pub fn is_stochastic(&self) -> bool {
        self.sap.is_some() || self.stages.iter().any(|s| s.is_stochastic())
    }

    pub fn has_shattered_stage(&self) -> bool {
        self.stages
            .iter()
            .any(|s| s.differentiability() == Differentiability::Shattered)
    }

    pub fn describe(&self) -> String {
        let mut parts: Vec<&str> = self.stages.iter().map(|s| s.name()).collect();
        if self.sap.is_some() {
            parts.push("sap");
        }
        if parts.is_empty() {
            "undefended".into()
        } else {
            parts.join("+")
        }
    }

    /// The realization used by deterministic models.
    pub fn fixed_draw(&self) -> ChainDraw {
        ChainDraw {
            stages: vec![Draw::Fixed; self.stages.len()],
            sap: None,
        }
    }

    pub fn sample_draw(&self, rng: &mut dyn RngCore) -> ChainDraw {
        ChainDraw {
            stages: self
                .stages
                .iter()
                .map(|s| {
                    if s.is_stochastic() {
                        Draw::Seed(rng.next_u64())
                    } else {
                        Draw::Fixed
                    }
                })
                .collect(),
            sap: self.sap.as_ref().map(|_| rng.next_u64()),
        }
    }

    /// Every realization with its probability, when the model's randomness
    /// is a finite set (no pruning and only enumerable random stages).
    pub fn enumerate(&self) -> Option<Vec<(ChainDraw, f64)>> {
        if self.sap.is_some() {
            return None;
        }
        let mut out = vec![(self.fixed_draw(), 1.0)];
        let mut shape = self.input_shape.clone();
        for (i, s) in self.stages.iter().enumerate() {
            if s.is_stochastic() {
                let probs = s.patterns(&shape)?;
                let mut next = Vec::with_capacity(out.len() * probs.len());
                for (d, p) in &out {
                    for (k, q) in probs.iter().enumerate() {
                        let mut d = d.clone();
                        d.stages[i] = Draw::Pattern(k);
                        next.push((d, p * q));
                    }
                }
                out = next;
            }
            shape = s.output_shape(&shape).ok()?;
        }
        Some(out)
    }

    /// Records the full defended forward pass.
    ///
    /// With `bpda`, every stage that has a registered surrogate gets it
    /// installed on its shattered node; a shattered stage without one is an
    /// error. The forward values are the same either way.
    pub fn record(&self, tape: &mut Tape, x: NodeId, draw: &ChainDraw, bpda: bool) -> Result<Trace> {
        if draw.stages.len() != self.stages.len() {
            return Err(invalid(format!(
                "draw covers {} stages, model has {}",
                draw.stages.len(),
                self.stages.len()
            )));
        }
        let mut h = x;
        for (stage, d) in self.stages.iter().zip(&draw.stages) {
            let nodes = stage.record(tape, h, *d)?;
            if bpda {
                if let Some(node) = nodes.shattered {
                    match self.surrogates.get(stage.name()) {
                        Some(sur) => sur.install(tape, node)?,
                        None => return Err(Error::MissingSurrogate(stage.name().to_string())),
                    }
                }
            }
            h = nodes.output;
        }
        match (&self.sap, draw.sap) {
            (Some(cfg), Some(seed)) => {
                let mut hook = SapHook::new(cfg.clone(), seed);
                self.classifier.record(tape, h, Some(&mut hook as &mut dyn ActivationHook))
            }
            (Some(_), None) => Err(invalid("stochastic activation pruning needs a draw")),
            _ => self.classifier.record(tape, h, None),
        }
    }

    pub fn logits(&self, x: &Tensor, draw: &ChainDraw) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xn = tape.leaf(x.clone());
        let trace = self.record(&mut tape, xn, draw, false)?;
        Ok(tape.value(trace.output).clone())
    }

    pub fn classify(&self, x: &Tensor, draw: &ChainDraw) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(x, draw)?))
    }

    /// Predictions from `trials` independent realizations, `[trial][image]`.
    /// Deterministic models are evaluated once and the result repeated.
    pub fn classify_trials(&self, x: &Tensor, trials: usize, rng: &mut dyn RngCore) -> Result<Vec<Vec<usize>>> {
        if !self.is_stochastic() {
            let p = self.classify(x, &self.fixed_draw())?;
            return Ok(vec![p; trials]);
        }
        (0..trials)
            .map(|_| {
                let d = self.sample_draw(rng);
                self.classify(x, &d)
            })
            .collect()
    }

    /// Clean accuracy in batches, counting an image correct if any of
    /// `trials` realizations classifies it correctly.
    pub fn accuracy(&self, images: &Tensor, labels: &[usize], trials: usize, rng: &mut dyn RngCore) -> Result<f64> {
        if labels.is_empty() {
            return Err(Error::EmptyEvaluationSet);
        }
        let mut correct = 0;
        for start in (0..labels.len()).step_by(250) {
            let idx: Vec<usize> = (start..(start + 250).min(labels.len())).collect();
            let x = images.select_rows(&idx);
            let preds = self.classify_trials(&x, trials.max(1), rng)?;
            correct += idx
                .iter()
                .enumerate()
                .filter(|(k, &i)| preds.iter().any(|p| p[*k] == labels[i]))
                .count();
        }
        Ok(correct as f64 / labels.len() as f64)
    }
}

/// Training through a chain: each batch sees a fresh realization. With
/// `surrogates`, shattered stages get their default surrogate, so the inner
/// maximization of adversarial training differentiates through them;
/// without, it sees the true (mostly zero) gradient.
impl InputFront for DefendedModelFront {
    fn record(&self, tape: &mut Tape, x: NodeId, rng: &mut rand_chacha::ChaCha8Rng) -> Result<NodeId> {
        let mut h = x;
        for s in &self.stages {
            let d = if s.is_stochastic() {
                Draw::Seed(rng.next_u64())
            } else {
                Draw::Fixed
            };
            let nodes = s.record(tape, h, d)?;
            if self.surrogates {
                if let (Some(node), Some(sur)) = (nodes.shattered, s.default_surrogate()) {
                    sur.install(tape, node)?;
                }
            }
            h = nodes.output;
        }
        Ok(h)
    }
}

/// The preprocessing part of a defense, usable as a training front.
#[derive(Clone, Debug)]
pub struct DefendedModelFront {
    pub stages: Vec<Arc<dyn InputStage>>,
    pub surrogates: bool,
}

impl DefendedModelFront {
    pub fn new(stages: Vec<Arc<dyn InputStage>>) -> Self {
        Self { stages, surrogates: true }
    }
}

//! Local intrinsic dimensionality of layer activations and a logistic
//! detector built on it.
//!
//! For a point `x` and a reference minibatch `S`, with `r_1 ≤ … ≤ r_k` the
//! distances from `x` to its `k` nearest neighbours in `S`,
//! `LID(x) = −(1/k Σ log(r_i / r_k))⁻¹`. One copy of `x` itself is never
//! counted as a neighbour.

use std::path::Path;
use std::sync::Arc;

use advlab_autodiff::{NodeId, Tape, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{Adam, AttackOutcome, BoxParam, Goal, Parameterization};
use crate::checkpoint::{Checkpoint, Metadata, RecordKind};
use crate::error::{invalid, Error, Result};
use crate::metrics;
use crate::model::{argmax_rows, Classifier, Layer, Network};
use crate::seeds::rng_for;

#[derive(Debug, Error, PartialEq)]
pub enum LidError {
    #[error("LID needs 2 ≤ k < number of candidate neighbours, got k = {k} with {available}")]
    BadK { k: usize, available: usize },
    #[error("degenerate neighbourhood: the {k} nearest distances are all equal")]
    Degenerate { k: usize },
    #[error("zero distance to a neighbour")]
    ZeroDistance,
    #[error("layer {layer}: {source}")]
    Layer {
        layer: usize,
        #[source]
        source: Box<LidError>,
    },
    #[error("degenerate LID features for clean examples {clean:?} and adversarial examples {adversarial:?}")]
    DegenerateFeatures { clean: Vec<usize>, adversarial: Vec<usize> },
}

/// LID from the distances to candidate neighbours (any order, at least `k`).
pub fn lid_from_distances(distances: &[f64], k: usize) -> std::result::Result<f64, LidError> {
    if k < 2 || distances.len() < k {
        return Err(LidError::BadK {
            k,
            available: distances.len(),
        });
    }
    let mut d = distances.to_vec();
    d.sort_by(f64::total_cmp);
    let d = &d[..k];
    if d[0] <= 0.0 {
        return Err(LidError::ZeroDistance);
    }
    let rk = d[k - 1];
    let s = d.iter().map(|r| (r / rk).ln()).sum::<f64>() / k as f64;
    if s == 0.0 {
        return Err(LidError::Degenerate { k });
    }
    Ok(-1.0 / s)
}

/// Index of the first row of `batch` bitwise equal to `x`.
fn self_index(x: &[f64], batch: &Tensor) -> Option<usize> {
    (0..batch.rows()).find(|&j| batch.row(j).iter().zip(x).all(|(a, b)| a.to_bits() == b.to_bits()))
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt()
}

/// LID of `x` against the rows of `batch` under `dist`. One row equal to
/// `x` is skipped; the minibatch must hold more than `k` rows.
pub fn lid_estimate(
    x: &[f64],
    batch: &Tensor,
    k: usize,
    dist: impl Fn(&[f64], &[f64]) -> f64,
) -> std::result::Result<f64, LidError> {
    if batch.rows() <= k {
        return Err(LidError::BadK {
            k,
            available: batch.rows(),
        });
    }
    let skip = self_index(x, batch);
    let d: Vec<f64> = (0..batch.rows())
        .filter(|&j| Some(j) != skip)
        .map(|j| dist(x, batch.row(j)))
        .collect();
    lid_from_distances(&d, k)
}

/// Where a feature vector came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Clean,
    Noisy,
    Adversarial,
}

/// One LID value per probed layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LidFeatures {
    pub values: Vec<f64>,
    pub source: Source,
}

/// Post-ReLU activations followed by the logits, each flattened to `[N, D]`.
pub fn layer_activations(model: &Classifier, x: &Tensor) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let xn = tape.leaf(x.clone());
    let trace = model.record(&mut tape, xn, None)?;
    trace
        .activations
        .iter()
        .chain(std::iter::once(&trace.output))
        .map(|&id| {
            let v = tape.value(id);
            Ok(v.clone().reshape(vec![v.rows(), v.row_len()])?)
        })
        .collect()
}

/// Number of probed layers of `model`.
pub fn probed_layers(model: &Classifier) -> usize {
    model.net.layers.iter().filter(|l| matches!(l, Layer::Relu)).count() + 1
}

/// LID features of each row of `x` against the clean `minibatch`. A row of
/// `x` that also occurs in the minibatch is not its own neighbour.
pub fn lid_features(
    model: &Classifier,
    x: &Tensor,
    minibatch: &Tensor,
    k: usize,
    source: Source,
) -> Result<Vec<LidFeatures>> {
    Ok(lid_features_checked(model, x, minibatch, k, source)?
        .into_iter()
        .collect::<std::result::Result<_, _>>()?)
}

fn lid_features_checked(
    model: &Classifier,
    x: &Tensor,
    minibatch: &Tensor,
    k: usize,
    source: Source,
) -> Result<Vec<std::result::Result<LidFeatures, LidError>>> {
    if x.shape()[1..] != minibatch.shape()[1..] {
        return Err(Error::Shape(format!(
            "queries {:?} and minibatch {:?} differ per example",
            x.shape(),
            minibatch.shape()
        )));
    }
    let qa = layer_activations(model, x)?;
    let sa = layer_activations(model, minibatch)?;
    Ok((0..x.rows())
        .map(|i| {
            let skip = self_index(x.row(i), minibatch);
            let values = qa
                .iter()
                .zip(&sa)
                .enumerate()
                .map(|(layer, (q, s))| {
                    let d: Vec<f64> = (0..s.rows())
                        .filter(|&j| Some(j) != skip)
                        .map(|j| euclidean(q.row(i), s.row(j)))
                        .collect();
                    lid_from_distances(&d, k).map_err(|e| LidError::Layer {
                        layer,
                        source: Box::new(e),
                    })
                })
                .collect::<std::result::Result<Vec<_>, _>>()?;
            Ok(LidFeatures { values, source })
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LidConfig {
    pub k: usize,
    /// Size of the clean minibatch neighbours are drawn from.
    pub batch_size: usize,
    /// Fraction of examples held out to measure AUC.
    pub holdout: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for LidConfig {
    fn default() -> Self {
        Self {
            k: 20,
            batch_size: 100,
            holdout: 0.3,
            epochs: 2000,
            learning_rate: 0.5,
            l2: 1e-3,
            threshold: 0.5,
            seed: 0,
        }
    }
}

impl LidConfig {
    fn validate(&self) -> Result<()> {
        if self.k < 2 || self.batch_size <= self.k {
            return Err(invalid(format!(
                "LID needs 2 ≤ k < batch_size, got k = {} and batch_size = {}",
                self.k, self.batch_size
            )));
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return Err(invalid("holdout fraction must lie in [0, 1)"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(invalid("detector threshold must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Logistic regression over standardized LID features.
#[derive(Clone, Debug, PartialEq)]
pub struct LidDetector {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub threshold: f64,
    /// Attack whose examples formed the positive class.
    pub attack: String,
    pub k: usize,
    pub batch_size: usize,
}

#[derive(Serialize, Deserialize)]
struct DetectorExtra {
    mean: Vec<f64>,
    std: Vec<f64>,
    threshold: f64,
    attack: String,
    k: usize,
    batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorReport {
    pub train_auc: f64,
    /// `None` when nothing was held out.
    pub heldout_auc: Option<f64>,
    pub train_examples: usize,
    pub heldout_examples: usize,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl LidDetector {
    /// Detector logit of a feature vector.
    pub fn logit(&self, f: &[f64]) -> f64 {
        self.bias
            + f.iter()
                .zip(&self.weights)
                .zip(self.mean.iter().zip(&self.std))
                .map(|((v, w), (m, s))| w * (v - m) / s)
                .sum::<f64>()
    }

    /// Probability-like score in `(0,1)`; high means adversarial.
    pub fn score(&self, f: &[f64]) -> f64 {
        sigmoid(self.logit(f))
    }

    pub fn is_flagged(&self, score: f64) -> bool {
        score >= self.threshold
    }

    pub fn to_checkpoint(&self, metadata: Metadata) -> Result<Checkpoint> {
        let l = self.weights.len();
        let net = Network::new(
            vec![l],
            vec![Layer::Dense { inputs: l, outputs: 1 }],
            vec![Tensor::new(vec![l, 1], self.weights.clone())?, Tensor::vector(vec![self.bias])],
        )?;
        let mut metadata = metadata;
        let extra = DetectorExtra {
            mean: self.mean.clone(),
            std: self.std.clone(),
            threshold: self.threshold,
            attack: self.attack.clone(),
            k: self.k,
            batch_size: self.batch_size,
        };
        metadata.extra.insert(
            "lid".into(),
            serde_json::to_value(extra).map_err(|e| invalid(format!("detector metadata: {e}")))?,
        );
        Ok(Checkpoint::from_network(RecordKind::LidDetector, &net, metadata))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(RecordKind::LidDetector)?;
        let extra: DetectorExtra = ck
            .metadata
            .extra
            .get("lid")
            .cloned()
            .ok_or_else(|| invalid("detector checkpoint lacks `lid` metadata"))
            .and_then(|v| serde_json::from_value(v).map_err(|e| invalid(format!("detector checkpoint: {e}"))))?;
        let [w, b] = &ck.tensors[..] else {
            return Err(invalid("detector checkpoint must hold one weight matrix and one bias"));
        };
        let l = w.numel();
        if b.numel() != 1 || extra.mean.len() != l || extra.std.len() != l {
            return Err(invalid("detector checkpoint tensors do not match its feature statistics"));
        }
        Ok(Self {
            weights: w.data().to_vec(),
            bias: b.data()[0],
            mean: extra.mean,
            std: extra.std,
            threshold: extra.threshold,
            attack: extra.attack,
            k: extra.k,
            batch_size: extra.batch_size,
        })
    }

    pub fn save(&self, path: &Path, metadata: Metadata) -> Result<()> {
        self.to_checkpoint(metadata)?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Area under the ROC curve as the Mann–Whitney statistic; ties count half.
pub fn auc(positive: &[f64], negative: &[f64]) -> Option<f64> {
    if positive.is_empty() || negative.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for p in positive {
        for n in negative {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Some(wins / (positive.len() * negative.len()) as f64)
}

/// Splits `0..n` into consecutive minibatches of `size`; a tail too short
/// for `k` neighbours is merged into the previous batch.
fn minibatches(n: usize, size: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = (0..n).collect::<Vec<_>>().chunks(size).map(|c| c.to_vec()).collect();
    if out.len() > 1 && out.last().is_some_and(|c| c.len() <= k) {
        let tail = out.pop().expect("nonempty");
        out.last_mut().expect("nonempty").extend(tail);
    }
    out
}

/// Features of `clean` against their own minibatches and of `adversarial`
/// row `j` against the minibatch of clean row `j mod |clean|`.
pub fn paired_features(
    model: &Classifier,
    clean: &Tensor,
    adversarial: &Tensor,
    k: usize,
    batch_size: usize,
) -> Result<(Vec<LidFeatures>, Vec<LidFeatures>)> {
    let n = clean.rows();
    if n == 0 || adversarial.rows() == 0 {
        return Err(Error::EmptyEvaluationSet);
    }
    if n <= k {
        return Err(LidError::BadK { k, available: n }.into());
    }
    let batches = minibatches(n, batch_size, k);
    let mut owner = vec![0; n];
    for (b, idx) in batches.iter().enumerate() {
        for &i in idx {
            owner[i] = b;
        }
    }
    let mut clean_f = vec![None; n];
    let mut adv_f = vec![None; adversarial.rows()];
    let (mut bad_clean, mut bad_adv) = (Vec::new(), Vec::new());
    for (b, idx) in batches.iter().enumerate() {
        let mb = clean.select_rows(idx);
        for (r, &i) in lid_features_checked(model, &mb, &mb, k, Source::Clean)?.into_iter().zip(idx) {
            match r {
                Ok(f) => clean_f[i] = Some(f),
                Err(_) => bad_clean.push(i),
            }
        }
        let adv_idx: Vec<usize> = (0..adversarial.rows()).filter(|j| owner[j % n] == b).collect();
        if adv_idx.is_empty() {
            continue;
        }
        let q = adversarial.select_rows(&adv_idx);
        for (r, &j) in lid_features_checked(model, &q, &mb, k, Source::Adversarial)?.into_iter().zip(&adv_idx) {
            match r {
                Ok(f) => adv_f[j] = Some(f),
                Err(_) => bad_adv.push(j),
            }
        }
    }
    if !bad_clean.is_empty() || !bad_adv.is_empty() {
        bad_adv.sort_unstable();
        return Err(LidError::DegenerateFeatures {
            clean: bad_clean,
            adversarial: bad_adv,
        }
        .into());
    }
    let unwrap = |v: Vec<Option<LidFeatures>>| v.into_iter().map(|f| f.expect("every row assigned")).collect();
    Ok((unwrap(clean_f), unwrap(adv_f)))
}

/// Trains a clean-versus-adversarial detector on LID features.
pub fn train_detector(
    model: &Classifier,
    clean: &Tensor,
    adversarial: &Tensor,
    attack: &str,
    cfg: &LidConfig,
) -> Result<(LidDetector, DetectorReport)> {
    cfg.validate()?;
    let (cf, af) = paired_features(model, clean, adversarial, cfg.k, cfg.batch_size)?;
    let mut examples: Vec<(Vec<f64>, f64)> = cf
        .into_iter()
        .map(|f| (f.values, 0.0))
        .chain(af.into_iter().map(|f| (f.values, 1.0)))
        .collect();
    examples.shuffle(&mut rng_for(cfg.seed, 1));
    let held = ((examples.len() as f64) * cfg.holdout).floor() as usize;
    let (test, train) = examples.split_at(held);
    if !train.iter().any(|e| e.1 == 0.0) || !train.iter().any(|e| e.1 == 1.0) {
        return Err(invalid("detector training split lacks one of the two classes"));
    }

    let l = train[0].0.len();
    let count = train.len() as f64;
    let mean: Vec<f64> = (0..l).map(|j| train.iter().map(|e| e.0[j]).sum::<f64>() / count).collect();
    let std: Vec<f64> = (0..l)
        .map(|j| {
            let v = train.iter().map(|e| (e.0[j] - mean[j]).powi(2)).sum::<f64>() / count;
            v.sqrt().max(1e-6)
        })
        .collect();
    let z: Vec<Vec<f64>> = train
        .iter()
        .map(|e| e.0.iter().zip(&mean).zip(&std).map(|((v, m), s)| (v - m) / s).collect())
        .collect();
    let mut w = vec![0.0; l];
    let mut b = 0.0;
    for _ in 0..cfg.epochs {
        let mut gw = vec![0.0; l];
        let mut gb = 0.0;
        for (zi, e) in z.iter().zip(train) {
            let p = sigmoid(b + zi.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>());
            let r = p - e.1;
            for (g, a) in gw.iter_mut().zip(zi) {
                *g += r * a;
            }
            gb += r;
        }
        for (wj, g) in w.iter_mut().zip(&gw) {
            *wj -= cfg.learning_rate * (g / count + cfg.l2 * *wj);
        }
        b -= cfg.learning_rate * gb / count;
    }
    let detector = LidDetector {
        weights: w,
        bias: b,
        mean,
        std,
        threshold: cfg.threshold,
        attack: attack.to_string(),
        k: cfg.k,
        batch_size: cfg.batch_size,
    };
    let split_auc = |set: &[(Vec<f64>, f64)]| {
        let (pos, neg): (Vec<_>, Vec<_>) = set.iter().partition(|e| e.1 == 1.0);
        let s = |v: Vec<&(Vec<f64>, f64)>| v.iter().map(|e| detector.score(&e.0)).collect::<Vec<_>>();
        auc(&s(pos), &s(neg))
    };
    let report = DetectorReport {
        train_auc: split_auc(train).expect("both classes present"),
        heldout_auc: split_auc(test),
        train_examples: train.len(),
        heldout_examples: test.len(),
    };
    Ok((detector, report))
}

/// Detector scores of the rows of `x` against the clean `minibatch`.
pub fn detect(detector: &LidDetector, model: &Classifier, x: &Tensor, minibatch: &Tensor) -> Result<Vec<f64>> {
    let feats = lid_features(model, x, minibatch, detector.k, Source::Clean)?;
    if feats.first().is_some_and(|f| f.values.len() != detector.weights.len()) {
        return Err(Error::Shape(format!(
            "detector expects {} features, the classifier probes {}",
            detector.weights.len(),
            feats[0].values.len()
        )));
    }
    Ok(feats.iter().map(|f| detector.score(&f.values)).collect())
}

/// Fraction of scores below the threshold.
pub fn benign_rate(detector: &LidDetector, scores: &[f64]) -> Option<f64> {
    metrics::mean(
        &scores
            .iter()
            .map(|&s| if detector.is_flagged(s) { 0.0 } else { 1.0 })
            .collect::<Vec<_>>(),
    )
}

/// Differentiable detector logit for queries at `input`, with every query's
/// `k` neighbours in `minibatch` held fixed: `neighbours[layer][query]` lists
/// indices ascending by distance.
pub fn record_lid_logit(
    tape: &mut Tape,
    detector: &LidDetector,
    model: &Classifier,
    input: NodeId,
    minibatch: &Tensor,
    neighbours: &[Vec<Vec<usize>>],
) -> Result<NodeId> {
    let n = tape.value(input).rows();
    let m = minibatch.rows();
    let k = detector.k;
    let bad = |v: &Vec<Vec<usize>>| v.len() != n || v.iter().any(|v| v.len() != k || v.iter().any(|&j| j >= m));
    if neighbours.len() != detector.weights.len() || neighbours.iter().any(bad) {
        return Err(invalid("every layer and query needs k neighbour indices into the minibatch"));
    }
    let reference = layer_activations(model, minibatch)?;
    let trace = model.record(tape, input, None)?;
    let layers: Vec<NodeId> = trace.activations.iter().copied().chain(std::iter::once(trace.output)).collect();
    if layers.len() != detector.weights.len() {
        return Err(Error::Shape("detector and classifier disagree on the probed layers".into()));
    }
    let ones = tape.constant(Arc::new(Tensor::full(&[1, m], 1.0)));
    let minus_one = tape.constant(Arc::new(Tensor::full(&[n], -1.0)));
    let mut logit: Option<NodeId> = None;
    for (j, (&a, s)) in layers.iter().zip(&reference).enumerate() {
        // Picks 1/2·(mean log d² − log d²_k) = mean log(r_i/r_k).
        let mut mask = Tensor::zeros(&[n, m]);
        for (i, nb) in neighbours[j].iter().enumerate() {
            for &c in nb {
                mask.row_mut(i)[c] += 0.5 / k as f64;
            }
            mask.row_mut(i)[nb[k - 1]] -= 0.5;
        }
        let mask = tape.constant(Arc::new(mask));
        let d = s.row_len();
        let a = tape.reshape(a, &[n, d])?;
        let sq = tape.mul(a, a)?;
        let norms = tape.sum_rows(sq)?;
        let col = tape.reshape(norms, &[n, 1])?;
        let tiled = tape.matmul(col, ones)?;
        let mut st = Tensor::zeros(&[d, m]);
        for r in 0..m {
            for (c, v) in s.row(r).iter().enumerate() {
                st.data_mut()[c * m + r] = *v;
            }
        }
        let st = tape.constant(Arc::new(st));
        let dots = tape.matmul(a, st)?;
        let dots = tape.affine(dots, -2.0, 0.0)?;
        let snorm = Tensor::vector((0..m).map(|r| s.row(r).iter().map(|v| v * v).sum()).collect());
        let snorm = tape.constant(Arc::new(snorm));
        let d2 = tape.add(tiled, dots)?;
        let d2 = tape.bias_add(d2, snorm)?;
        // Non-neighbour entries are masked out but must stay finite.
        let d2 = tape.clamp(d2, 1e-12, f64::INFINITY)?;
        let logd = tape.log(d2)?;
        let weighted = tape.mul(logd, mask)?;
        let s_mean = tape.sum_rows(weighted)?;
        let lid = tape.div(minus_one, s_mean)?;
        let term = tape.affine(
            lid,
            detector.weights[j] / detector.std[j],
            -detector.weights[j] * detector.mean[j] / detector.std[j],
        )?;
        logit = Some(match logit {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(tape.affine(logit.expect("at least the logit layer"), 1.0, detector.bias)?)
}

/// Indices of the `k` nearest minibatch rows to each query at every probed
/// layer, ascending; one copy of the query itself is skipped.
pub fn nearest_neighbours(model: &Classifier, x: &Tensor, minibatch: &Tensor, k: usize) -> Result<Vec<Vec<Vec<usize>>>> {
    let qa = layer_activations(model, x)?;
    let sa = layer_activations(model, minibatch)?;
    let skip: Vec<Option<usize>> = (0..x.rows()).map(|i| self_index(x.row(i), minibatch)).collect();
    Ok(qa
        .iter()
        .zip(&sa)
        .map(|(q, s)| {
            (0..q.rows())
                .map(|i| {
                    let mut d: Vec<(f64, usize)> = (0..s.rows())
                        .filter(|&j| Some(j) != skip[i])
                        .map(|j| (euclidean(q.row(i), s.row(j)), j))
                        .collect();
                    d.sort_by(|a, b| a.0.total_cmp(&b.0));
                    d.iter().take(k).map(|e| e.1).collect()
                })
                .collect()
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptiveLidConfig {
    /// Weight of the misclassification and detector terms against distance.
    pub alpha: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for AdaptiveLidConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            iterations: 200,
            learning_rate: 0.05,
            seed: 0,
        }
    }
}

/// Outcome rates of the gradient-based attack on classifier plus detector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveLidReport {
    pub misclassified: f64,
    pub detected: f64,
    /// Misclassified and not flagged.
    pub evaded: f64,
    pub mean_rms: f64,
}

/// Minimizes `‖x' − x‖² + α(max(margin, 0) + detector logit)` with Adam in
/// the `tanh` box, the LID neighbours re-chosen and then frozen at every step.
///
/// This attack is expected to do poorly: the surrogate gradient through fixed
/// neighbour sets is a weak guide. It exists to measure that, not to be used
/// as the attack against LID.
pub fn adaptive_lid_attack(
    detector: &LidDetector,
    model: &Classifier,
    minibatch: &Tensor,
    x: &Tensor,
    goal: &Goal,
    cfg: &AdaptiveLidConfig,
) -> Result<(Vec<AttackOutcome>, AdaptiveLidReport)> {
    if goal.is_empty() {
        return Err(Error::EmptyEvaluationSet);
    }
    if cfg.iterations == 0 || !(cfg.alpha > 0.0) {
        return Err(invalid("adaptive attack needs iterations > 0 and α > 0"));
    }
    let param = BoxParam::new(x);
    let mut w = param.init();
    let mut adam = Adam::new(cfg.learning_rate);
    let reference = Arc::new(x.clone());
    let mut current = x.clone();
    let mut last = vec![f64::NAN; goal.len()];
    for _ in 0..cfg.iterations {
        let nb = nearest_neighbours(model, &current, minibatch, detector.k)?;
        let mut tape = Tape::new();
        let leaf = tape.leaf(w.clone());
        let input = param.record(&mut tape, leaf)?;
        let r = tape.constant(reference.clone());
        let dlt = tape.sub(input, r)?;
        let d2 = tape.mul(dlt, dlt)?;
        let dist = tape.sum_rows(d2)?;
        let logits = model.record(&mut tape, input, None)?.output;
        let margin = tape.margin(logits, goal.classes(), goal.is_targeted())?;
        let hinge = tape.relu(margin)?;
        let det = record_lid_logit(&mut tape, detector, model, input, minibatch, &nb)?;
        let penalty = tape.add(hinge, det)?;
        let penalty = tape.affine(penalty, cfg.alpha, 0.0)?;
        let per = tape.add(dist, penalty)?;
        last = tape.value(per).data().to_vec();
        let total = tape.sum(per)?;
        let g = tape.backward(total, &[leaf])?.remove(leaf).expect("leaf gradient");
        if !g.all_finite() {
            return Err(invalid("adaptive LID attack produced a non-finite gradient"));
        }
        adam.step(&mut w, &g);
        current = w.map(|v| (v.tanh() + 1.0) / 2.0);
    }
    let preds = argmax_rows(&model.logits(&current)?);
    let scores = detect(detector, model, &current, minibatch)?;
    let per_example = &x.shape()[1..];
    let mut outcomes = Vec::with_capacity(goal.len());
    let (mut mis, mut det, mut ev) = (0usize, 0usize, 0usize);
    for i in 0..goal.len() {
        let (a, o) = (current.row(i), x.row(i));
        let hit = goal.achieved(i, preds[i]);
        let flagged = detector.is_flagged(scores[i]);
        mis += hit as usize;
        det += flagged as usize;
        ev += (hit && !flagged) as usize;
        outcomes.push(AttackOutcome {
            adversarial: Tensor::new(per_example.to_vec(), a.to_vec())?,
            label: goal.labels[i],
            target: goal.targets.as_ref().map(|t| t[i]),
            success: hit && !flagged,
            adversarial_trials: hit as usize,
            linf: metrics::linf(o, a)?,
            l2: metrics::l2(o, a)?,
            l2_raw: metrics::l2_raw(o, a)?,
            rms: metrics::rms(o, a)?,
            iterations: cfg.iterations,
            final_loss: last[i],
            zero_gradient: false,
        });
    }
    let n = goal.len() as f64;
    let report = AdaptiveLidReport {
        misclassified: mis as f64 / n,
        detected: det as f64 / n,
        evaded: ev as f64 / n,
        mean_rms: outcomes.iter().map(|o| o.rms).sum::<f64>() / n,
    };
    Ok((outcomes, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn formula_example_and_scale_invariance() {
        let a = lid_from_distances(&[1.0, 2.0, 4.0], 3).unwrap();
        assert!((a - 1.0 / 2f64.ln()).abs() < 1e-12);
        let b = lid_from_distances(&[8.0, 2.0, 4.0], 3).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn degenerate_neighbourhoods_are_errors() {
        assert_eq!(lid_from_distances(&[1.0, 1.0, 1.0], 3), Err(LidError::Degenerate { k: 3 }));
        assert_eq!(lid_from_distances(&[0.0, 1.0, 2.0], 3), Err(LidError::ZeroDistance));
        assert!(matches!(lid_from_distances(&[1.0, 2.0], 3), Err(LidError::BadK { .. })));
        assert!(matches!(lid_from_distances(&[1.0, 2.0], 1), Err(LidError::BadK { .. })));
    }

    #[test]
    fn self_is_excluded_but_a_duplicate_is_not() {
        let s = Tensor::new(vec![4, 1], vec![0.0, 1.0, 3.0, 7.0]).unwrap();
        let v = lid_estimate(&[0.0], &s, 3, euclidean).unwrap();
        assert!((v - lid_from_distances(&[1.0, 3.0, 7.0], 3).unwrap()).abs() < 1e-12);
        let dup = Tensor::new(vec![4, 1], vec![0.0, 0.0, 3.0, 7.0]).unwrap();
        assert_eq!(lid_estimate(&[0.0], &dup, 3, euclidean), Err(LidError::ZeroDistance));
        assert!(matches!(lid_estimate(&[0.0], &s, 4, euclidean), Err(LidError::BadK { .. })));
    }

    #[test]
    fn linear_classifier_matches_projected_points() {
        let w = Tensor::new(vec![3, 2], vec![1.0, -0.5, 0.25, 2.0, -1.0, 0.5]).unwrap();
        let b = Tensor::vector(vec![0.1, -0.2]);
        let net = Network::new(
            vec![3],
            vec![Layer::Dense { inputs: 3, outputs: 2 }],
            vec![w.clone(), b.clone()],
        )
        .unwrap();
        let model = Classifier::new(net).unwrap();
        let data: Vec<f64> = (0..18).map(|i| ((i * 37 % 17) as f64 / 7.0).sin()).collect();
        let s = Tensor::new(vec![6, 3], data).unwrap();
        let feats = lid_features(&model, &s, &s, 3, Source::Clean).unwrap();
        let proj = model.logits(&s).unwrap();
        for (i, f) in feats.iter().enumerate() {
            assert_eq!(f.values.len(), 1);
            let mut d: Vec<f64> = (0..6).filter(|&j| j != i).map(|j| euclidean(proj.row(i), proj.row(j))).collect();
            d.sort_by(f64::total_cmp);
            let brute = -1.0 / (d[..3].iter().map(|r| (r / d[2]).ln()).sum::<f64>() / 3.0);
            assert!((f.values[0] - brute).abs() < 1e-12);
        }
    }

    #[test]
    fn feature_length_is_probed_layer_count() {
        let model = Classifier::mlp(&[4, 4, 1], &[8, 6], 3, 0).unwrap();
        let x = Tensor::new(vec![12, 4, 4, 1], (0..192).map(|i| (i as f64 * 0.37).sin().abs()).collect()).unwrap();
        let f = lid_features(&model, &x, &x, 4, Source::Clean).unwrap();
        assert_eq!(probed_layers(&model), 3);
        assert!(f.iter().all(|f| f.values.len() == 3 && f.values.iter().all(|v| v.is_finite() && *v > 0.0)));
        let mut dup = x.clone();
        let first = dup.row(0).to_vec();
        dup.row_mut(1).copy_from_slice(&first);
        assert!(lid_features(&model, &dup, &dup, 4, Source::Clean).is_err());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[2.0, 3.0], &[0.0, 1.0]), Some(1.0));
        assert_eq!(auc(&[0.0], &[1.0]), Some(0.0));
        assert_eq!(auc(&[1.0], &[1.0]), Some(0.5));
        assert_eq!(auc(&[], &[1.0]), None);
    }

    #[test]
    fn minibatch_tail_is_merged() {
        let b = minibatches(205, 100, 20);
        assert_eq!(b.len(), 2);
        assert_eq!(b[1].len(), 105);
        assert_eq!(minibatches(250, 100, 20).len(), 3);
    }

    #[test]
    fn detector_checkpoint_round_trip() {
        let d = LidDetector {
            weights: vec![0.5, -1.0],
            bias: 0.25,
            mean: vec![3.0, 4.0],
            std: vec![1.0, 2.0],
            threshold: 0.5,
            attack: "pgd_linf".into(),
            k: 20,
            batch_size: 100,
        };
        let ck = d.to_checkpoint(Metadata::default()).unwrap();
        let back = LidDetector::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, d);
        assert!((d.score(&[3.0, 4.0]) - sigmoid(0.25)).abs() < 1e-12);
    }

    #[test]
    fn lid_logit_surrogate_matches_detector_at_fixed_neighbours() {
        let model = Classifier::mlp(&[2, 2, 1], &[5], 3, 2).unwrap();
        let s = Tensor::new(vec![10, 2, 2, 1], (0..40).map(|i| (i * 13 % 11) as f64 / 11.0).collect()).unwrap();
        let x = Tensor::new(vec![2, 2, 2, 1], vec![0.3, 0.6, 0.2, 0.9, 0.7, 0.1, 0.4, 0.5]).unwrap();
        let det = LidDetector {
            weights: vec![0.7, -0.3],
            bias: 0.1,
            mean: vec![2.0, 1.5],
            std: vec![1.0, 0.5],
            threshold: 0.5,
            attack: "x".into(),
            k: 3,
            batch_size: 10,
        };
        let exact = detect(&det, &model, &x, &s).unwrap();
        let nb = nearest_neighbours(&model, &x, &s, 3).unwrap();
        let mut tape = Tape::new();
        let leaf = tape.leaf(x.clone());
        let out = record_lid_logit(&mut tape, &det, &model, leaf, &s, &nb).unwrap();
        for (l, e) in tape.value(out).data().iter().zip(&exact) {
            assert!((sigmoid(*l) - e).abs() < 1e-9);
        }
        let total = tape.sum(out).unwrap();
        let g = tape.backward(total, &[leaf]).unwrap();
        assert!(g.get(leaf).unwrap().all_finite());
    }

    proptest! {
        #[test]
        fn scale_and_permutation_invariance(
            d in proptest::collection::vec(0.01f64..10.0, 5..30),
            scale in 0.01f64..100.0,
            rot in 0usize..30,
        ) {
            let k = 4;
            match lid_from_distances(&d, k) {
                Ok(a) => {
                    let scaled: Vec<f64> = d.iter().map(|v| v * scale).collect();
                    let b = lid_from_distances(&scaled, k).unwrap();
                    prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
                    let mut p = d.clone();
                    p.rotate_left(rot % d.len());
                    prop_assert_eq!(lid_from_distances(&p, k).unwrap(), a);
                    prop_assert!(a > 0.0);
                }
                Err(e) => prop_assert_eq!(e, LidError::Degenerate { k }),
            }
        }

        #[test]
        fn neighbour_selection_matches_exhaustive_sort(
            pts in proptest::collection::vec(0.0f64..1.0, 24),
            q in proptest::collection::vec(0.0f64..1.0, 2),
        ) {
            let s = Tensor::new(vec![12, 2], pts).unwrap();
            let mut all: Vec<f64> = (0..12).map(|j| euclidean(&q, s.row(j))).collect();
            all.sort_by(f64::total_cmp);
            let k = 5;
            let brute = lid_from_distances(&all[..k], k);
            prop_assert_eq!(lid_estimate(&q, &s, k, euclidean), brute);
        }
    }
}

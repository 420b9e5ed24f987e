//! Feed-forward networks, classifiers and their training loops.

use std::sync::Arc;

use advlab_autodiff::{log_sum_exp, NodeId, Padding, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{invalid, Error, Result};
use crate::seeds::derive_seed;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Flatten,
    Dense {
        inputs: usize,
        outputs: usize,
    },
    /// Stride-1 convolution over NHWC input.
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        same: bool,
    },
    Relu,
    Sigmoid,
    MaxPool2,
}

impl Layer {
    fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            Layer::Dense { inputs, outputs } => vec![vec![inputs, outputs], vec![outputs]],
            Layer::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![vec![kernel, kernel, in_channels, out_channels], vec![out_channels]],
            _ => vec![],
        }
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = || Error::Shape(format!("layer {self:?} cannot take input {input:?}"));
        match *self {
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Dense { inputs, outputs } => {
                if input != [inputs] {
                    return Err(bad());
                }
                Ok(vec![outputs])
            }
            Layer::Conv {
                in_channels,
                out_channels,
                kernel,
                same,
            } => {
                let [h, w, c] = input else { return Err(bad()) };
                if *c != in_channels || (!same && (*h < kernel || *w < kernel)) {
                    return Err(bad());
                }
                if same {
                    Ok(vec![*h, *w, out_channels])
                } else {
                    Ok(vec![h - kernel + 1, w - kernel + 1, out_channels])
                }
            }
            Layer::MaxPool2 => {
                let [h, w, c] = input else { return Err(bad()) };
                Ok(vec![h / 2, w / 2, *c])
            }
            Layer::Relu | Layer::Sigmoid => Ok(input.to_vec()),
        }
    }
}

/// Hook invoked after every ReLU; stochastic activation pruning plugs in here.
pub trait ActivationHook {
    fn after_activation(&mut self, tape: &mut Tape, node: NodeId, layer: usize) -> Result<NodeId>;
}

/// Nodes produced by recording a network on a tape.
#[derive(Clone, Debug)]
pub struct Trace {
    pub output: NodeId,
    /// Post-ReLU activations in layer order (after any hook).
    pub activations: Vec<NodeId>,
    /// Parameter nodes, in [`Network::params`] order.
    pub params: Vec<NodeId>,
}

/// A sequential stack of layers with immutable, shareable parameters.
#[derive(Clone, Debug)]
pub struct Network {
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
    pub params: Vec<Arc<Tensor>>,
}

impl Network {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>, params: Vec<Tensor>) -> Result<Self> {
        let expected = Self::expected_param_shapes(&input_shape, &layers)?;
        if expected.len() != params.len() {
            return Err(Error::Shape(format!(
                "network expects {} parameter tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (i, (e, p)) in expected.iter().zip(&params).enumerate() {
            if e.as_slice() != p.shape() {
                return Err(Error::Shape(format!("parameter {i}: expected {e:?}, got {:?}", p.shape())));
            }
        }
        Ok(Self {
            input_shape,
            layers,
            params: params.into_iter().map(Arc::new).collect(),
        })
    }

    /// He-normal weights and zero biases.
    pub fn init(input_shape: Vec<usize>, layers: Vec<Layer>, seed: u64) -> Result<Self> {
        let shapes = Self::expected_param_shapes(&input_shape, &layers)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = shapes
            .into_iter()
            .map(|s| {
                if s.len() == 1 {
                    return Tensor::zeros(&s);
                }
                let fan_in: usize = s[..s.len() - 1].iter().product();
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive sigma");
                let n = s.iter().product();
                Tensor::new(s, (0..n).map(|_| normal.sample(&mut rng)).collect()).expect("consistent shape")
            })
            .collect();
        Self::new(input_shape, layers, params)
    }

    fn expected_param_shapes(input_shape: &[usize], layers: &[Layer]) -> Result<Vec<Vec<usize>>> {
        let mut shape = input_shape.to_vec();
        let mut out = Vec::new();
        for l in layers {
            out.extend(l.param_shapes());
            shape = l.output_shape(&shape)?;
        }
        Ok(out)
    }

    /// Per-example output shape.
    pub fn output_shape(&self) -> Vec<usize> {
        self.layers
            .iter()
            .try_fold(self.input_shape.clone(), |s, l| l.output_shape(&s))
            .expect("validated at construction")
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            let kind = match l {
                Layer::Dense { .. } => "dense",
                Layer::Conv { .. } => "conv",
                _ => continue,
            };
            names.push(format!("{kind}{i}.weight"));
            names.push(format!("{kind}{i}.bias"));
        }
        names
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            return Err(Error::Shape(format!(
                "network expects [N, {}], got {shape:?}",
                self.input_shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
            )));
        }
        Ok(())
    }

    /// Records the network on `tape` starting from node `x`.
    pub fn record(&self, tape: &mut Tape, x: NodeId, mut hook: Option<&mut dyn ActivationHook>) -> Result<Trace> {
        self.check_input(tape.value(x).shape())?;
        let n = tape.value(x).rows();
        let params: Vec<NodeId> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
        let mut next_param = 0;
        let mut activations = Vec::new();
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = match layer {
                Layer::Flatten => {
                    let len = tape.value(h).row_len();
                    tape.reshape(h, &[n, len])?
                }
                Layer::Dense { .. } => {
                    let (w, b) = (params[next_param], params[next_param + 1]);
                    next_param += 2;
                    let z = tape.matmul(h, w)?;
                    tape.bias_add(z, b)?
                }
                Layer::Conv { same, .. } => {
                    let (w, b) = (params[next_param], params[next_param + 1]);
                    next_param += 2;
                    let pad = if *same { Padding::Same } else { Padding::Valid };
                    let z = tape.conv2d(h, w, pad)?;
                    tape.bias_add(z, b)?
                }
                Layer::Relu => {
                    let mut a = tape.relu(h)?;
                    if let Some(hook) = hook.as_deref_mut() {
                        a = hook.after_activation(tape, a, i)?;
                    }
                    activations.push(a);
                    a
                }
                Layer::Sigmoid => tape.sigmoid(h)?,
                Layer::MaxPool2 => tape.max_pool2(h)?,
            };
        }
        Ok(Trace {
            output: h,
            activations,
            params,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xn = tape.leaf(x.clone());
        let trace = self.record(&mut tape, xn, None)?;
        Ok(tape.value(trace.output).clone())
    }

    pub(crate) fn with_params(&self, params: Vec<Tensor>) -> Self {
        Self {
            input_shape: self.input_shape.clone(),
            layers: self.layers.clone(),
            params: params.into_iter().map(Arc::new).collect(),
        }
    }
}

/// A network whose output is a row of class logits.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub net: Network,
    pub num_classes: usize,
}

impl Classifier {
    pub fn new(net: Network) -> Result<Self> {
        let out = net.output_shape();
        let [num_classes] = out[..] else {
            return Err(Error::Shape(format!("classifier output must be a logit vector, got {out:?}")));
        };
        Ok(Self { net, num_classes })
    }

    /// Flatten, `hidden` dense+ReLU layers, then a dense logit layer.
    pub fn mlp(input_shape: &[usize], hidden: &[usize], num_classes: usize, seed: u64) -> Result<Self> {
        let mut layers = vec![Layer::Flatten];
        let mut width: usize = input_shape.iter().product();
        for &h in hidden {
            layers.push(Layer::Dense { inputs: width, outputs: h });
            layers.push(Layer::Relu);
            width = h;
        }
        layers.push(Layer::Dense {
            inputs: width,
            outputs: num_classes,
        });
        Self::new(Network::init(input_shape.to_vec(), layers, seed)?)
    }

    /// Two 3×3 same-padded conv+ReLU+pool blocks (8 and 16 channels), a
    /// 64-unit dense layer and the logit layer.
    pub fn cnn(input_shape: &[usize], num_classes: usize, seed: u64) -> Result<Self> {
        let [h, w, c] = input_shape[..] else {
            return Err(Error::Shape(format!("cnn input must be [H, W, C], got {input_shape:?}")));
        };
        let layers = vec![
            Layer::Conv {
                in_channels: c,
                out_channels: 8,
                kernel: 3,
                same: true,
            },
            Layer::Relu,
            Layer::MaxPool2,
            Layer::Conv {
                in_channels: 8,
                out_channels: 16,
                kernel: 3,
                same: true,
            },
            Layer::Relu,
            Layer::MaxPool2,
            Layer::Flatten,
            Layer::Dense {
                inputs: (h / 4) * (w / 4) * 16,
                outputs: 64,
            },
            Layer::Relu,
            Layer::Dense {
                inputs: 64,
                outputs: num_classes,
            },
        ];
        Self::new(Network::init(input_shape.to_vec(), layers, seed)?)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.net.input_shape
    }

    pub fn record(&self, tape: &mut Tape, x: NodeId, hook: Option<&mut dyn ActivationHook>) -> Result<Trace> {
        self.net.record(tape, x, hook)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.net.forward(x)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(x)?))
    }

    pub fn accuracy(&self, data: &LabeledDataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::EmptyEvaluationSet);
        }
        let mut correct = 0;
        for start in (0..data.len()).step_by(500) {
            let idx: Vec<usize> = (start..(start + 500).min(data.len())).collect();
            let (x, y) = data.batch(&idx);
            correct += self.predict(&x)?.iter().zip(&y).filter(|(p, t)| p == t).count();
        }
        Ok(correct as f64 / data.len() as f64)
    }
}

/// Index of the largest entry in each row (first on ties).
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Mean softmax cross-entropy of `[N, C]` logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if logits.shape().len() != 2 || logits.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "logits {:?} do not match {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::EmptyEvaluationSet);
    }
    let c = logits.row_len();
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(invalid(format!("label {y} out of range for {c} classes")));
        }
        let row = logits.row(i);
        total += log_sum_exp(row) - row[y];
    }
    Ok(total / labels.len() as f64)
}

/// Row-wise softmax.
pub fn softmax(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let lse = log_sum_exp(logits.row(i));
        for v in out.row_mut(i) {
            *v = (*v - lse).exp();
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Training

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 50,
            seed: 0,
        }
    }
}

/// Inner maximization for min-max training: PGD-ℓ∞ with `steps` steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversarialTraining {
    pub epsilon: f64,
    #[serde(default = "default_pgd_steps")]
    pub steps: usize,
}

fn default_pgd_steps() -> usize {
    7
}

/// A transformation applied to every training batch before the classifier,
/// e.g. an input encoding or a randomized preprocessing chain.
pub trait InputFront: Send + Sync {
    fn record(&self, tape: &mut Tape, x: NodeId, rng: &mut ChaCha8Rng) -> Result<NodeId>;
}

pub fn train(model: &Classifier, data: &LabeledDataset, cfg: &TrainConfig) -> Result<Classifier> {
    train_with(model, data, cfg, None, None)
}

pub fn adversarial_train(
    model: &Classifier,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    adv: &AdversarialTraining,
) -> Result<Classifier> {
    if adv.epsilon.is_nan() || adv.epsilon < 0.0 || adv.steps == 0 {
        return Err(invalid("adversarial training needs ε ≥ 0 and at least one PGD step"));
    }
    train_with(model, data, cfg, None, Some(adv))
}

/// Minibatch SGD with momentum on mean cross-entropy.
///
/// With `adv`, each batch is replaced by PGD-ℓ∞ adversarial counterparts
/// computed against the current parameters (through `front` if given).
/// One step means FGSM from the clean point; more steps use a random start
/// and step 2.5ε/steps.
pub fn train_with(
    model: &Classifier,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    front: Option<&dyn InputFront>,
    adv: Option<&AdversarialTraining>,
) -> Result<Classifier> {
    if data.is_empty() {
        return Err(Error::EmptyEvaluationSet);
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(invalid("batch_size must be positive and learning_rate > 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut front_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
    let mut adv_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2));
    let mut current = model.clone();
    let mut velocity: Vec<Tensor> = current.net.params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (mut x, y) = data.batch(chunk);
            if let Some(a) = adv.filter(|a| a.epsilon > 0.0) {
                x = inner_pgd(&current, front, &x, &y, a, &mut front_rng, &mut adv_rng)?;
            }
            let mut tape = Tape::new();
            let xn = tape.leaf(x);
            let input = match front {
                Some(f) => f.record(&mut tape, xn, &mut front_rng)?,
                None => xn,
            };
            let nonfinite = |e: Error| match e {
                Error::Autodiff(advlab_autodiff::AutodiffError::NonFinite { .. }) => Error::Diverged {
                    epoch,
                    loss: f64::NAN,
                },
                other => other,
            };
            let trace = current.record(&mut tape, input, None).map_err(nonfinite)?;
            let ce = tape.softmax_cross_entropy(trace.output, &y).map_err(|e| nonfinite(e.into()))?;
            let loss = tape.mean(ce).map_err(|e| nonfinite(e.into()))?;
            let value = tape.value(loss).item().unwrap_or(f64::NAN);
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, loss: value });
            }
            epoch_loss += value * chunk.len() as f64;
            let grads = tape.backward(loss, &trace.params)?;
            let mut params: Vec<Tensor> = Vec::with_capacity(trace.params.len());
            for ((p, v), id) in current.net.params.iter().zip(velocity.iter_mut()).zip(&trace.params) {
                let g = grads.get(*id).expect("parameter gradient");
                let mut next = (**p).clone();
                for ((w, vel), gi) in next.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                    *vel = cfg.momentum * *vel + gi;
                    *w -= cfg.learning_rate * *vel;
                }
                params.push(next);
            }
            if params.iter().any(|p| !p.all_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    loss: f64::NAN,
                });
            }
            current.net = current.net.with_params(params);
        }
        if !(epoch_loss / data.len() as f64).is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: epoch_loss,
            });
        }
    }
    Ok(current)
}

fn inner_pgd(
    model: &Classifier,
    front: Option<&dyn InputFront>,
    x: &Tensor,
    y: &[usize],
    adv: &AdversarialTraining,
    front_rng: &mut ChaCha8Rng,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let eps = adv.epsilon;
    let (mut xa, alpha) = if adv.steps == 1 {
        (x.clone(), eps)
    } else {
        let mut start = x.clone();
        for v in start.data_mut() {
            *v = (*v + rng.random_range(-eps..=eps)).clamp(0.0, 1.0);
        }
        (start, 2.5 * eps / adv.steps as f64)
    };
    for _ in 0..adv.steps {
        let mut tape = Tape::new();
        let xn = tape.leaf(xa.clone());
        let input = match front {
            Some(f) => f.record(&mut tape, xn, front_rng)?,
            None => xn,
        };
        let trace = model.record(&mut tape, input, None)?;
        let ce = tape.softmax_cross_entropy(trace.output, y)?;
        let loss = tape.sum(ce)?;
        let g = tape.backward(loss, &[xn])?.remove(xn).expect("input gradient");
        for ((a, o), gi) in xa.data_mut().iter_mut().zip(x.data()).zip(g.data()) {
            let step = *a + alpha * sign(*gi);
            *a = step.clamp(o - eps, o + eps).clamp(0.0, 1.0);
        }
    }
    Ok(xa)
}

/// `sign` with `sign(0) = 0`.
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

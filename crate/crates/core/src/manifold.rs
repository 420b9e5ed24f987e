//! A small generative decoder, projection onto its range as a defense, and
//! the latent-space attack that sidesteps the projection.

use std::path::Path;
use std::sync::Arc;

use advlab_autodiff::{NodeId, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attacks::{finish, lagrangian_search, Adam, AttackConfig, AttackOutcome, Candidate, Goal, Parameterization};
use crate::checkpoint::{Checkpoint, Metadata, RecordKind};
use crate::data::LabeledDataset;
use crate::defenses::{shattered_nodes, DefendedModel, Differentiability, Draw, InputStage, ShatteredOp, StageNodes};
use crate::error::{invalid, Error, Result};
use crate::model::{Layer, Network};
use crate::seeds::{derive_seed, rng_for};

/// `G: latent → image`, a dense stack ending in a sigmoid.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub net: Network,
    pub image_shape: Vec<usize>,
    /// Per-coordinate mean and spread of training latents; projection
    /// restarts are drawn from this Gaussian.
    pub latent_mean: Vec<f64>,
    pub latent_std: Vec<f64>,
}

impl Decoder {
    pub fn latent_dim(&self) -> usize {
        self.net.input_shape[0]
    }

    pub fn record(&self, tape: &mut Tape, z: NodeId) -> Result<NodeId> {
        let n = tape.value(z).rows();
        let out = self.net.record(tape, z, None)?.output;
        let mut shape = vec![n];
        shape.extend(&self.image_shape);
        Ok(tape.reshape(out, &shape)?)
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let zn = tape.leaf(z.clone());
        let out = self.record(&mut tape, zn)?;
        Ok(tape.value(out).clone())
    }

    pub fn to_checkpoint(&self, mut metadata: Metadata) -> Checkpoint {
        metadata.extra.insert("image_shape".into(), serde_json::json!(self.image_shape));
        metadata.extra.insert("latent_mean".into(), serde_json::json!(self.latent_mean));
        metadata.extra.insert("latent_std".into(), serde_json::json!(self.latent_std));
        Checkpoint::from_network(RecordKind::Decoder, &self.net, metadata)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(RecordKind::Decoder)?;
        let field = |k: &str| -> Result<serde_json::Value> {
            ck.metadata
                .extra
                .get(k)
                .cloned()
                .ok_or_else(|| invalid(format!("decoder checkpoint lacks `{k}`")))
        };
        let parse = |e: serde_json::Error| invalid(format!("decoder checkpoint: {e}"));
        let image_shape: Vec<usize> = serde_json::from_value(field("image_shape")?).map_err(parse)?;
        let latent_mean: Vec<f64> = serde_json::from_value(field("latent_mean")?).map_err(parse)?;
        let latent_std: Vec<f64> = serde_json::from_value(field("latent_std")?).map_err(parse)?;
        let net = ck.to_network()?;
        let d = net.input_shape.iter().product::<usize>();
        if latent_mean.len() != d || latent_std.len() != d {
            return Err(invalid("decoder latent statistics do not match the latent size"));
        }
        if net.output_shape() != [image_shape.iter().product::<usize>()] {
            return Err(Error::Shape(format!(
                "decoder output {:?} does not fill images of shape {image_shape:?}",
                net.output_shape()
            )));
        }
        Ok(Self {
            net,
            image_shape,
            latent_mean,
            latent_std,
        })
    }

    pub fn save(&self, path: &Path, metadata: Metadata) -> Result<()> {
        self.to_checkpoint(metadata).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            hidden: 256,
            epochs: 40,
            batch_size: 50,
            learning_rate: 3e-3,
            seed: 0,
        }
    }
}

/// Reconstruction quality on the training set after training.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ReconstructionStats {
    /// `sqrt(mean (G(E(x)) - x)²)` over all pixels.
    pub rms: f64,
    /// Mean of `‖G(E(x)) - x‖₂ / N`.
    pub mean_l2: f64,
}

fn encoder_layers(pixels: usize, hidden: usize, d: usize) -> Vec<Layer> {
    vec![
        Layer::Flatten,
        Layer::Dense {
            inputs: pixels,
            outputs: hidden,
        },
        Layer::Relu,
        Layer::Dense { inputs: hidden, outputs: d },
    ]
}

fn decoder_layers(pixels: usize, hidden: usize, d: usize) -> Vec<Layer> {
    vec![
        Layer::Dense { inputs: d, outputs: hidden },
        Layer::Relu,
        Layer::Dense {
            inputs: hidden,
            outputs: pixels,
        },
        Layer::Sigmoid,
    ]
}

/// Trains the decoder as the second half of an autoencoder on mean squared
/// reconstruction error with Adam. The encoder is discarded.
pub fn train_decoder(data: &LabeledDataset, cfg: &DecoderConfig) -> Result<(Decoder, ReconstructionStats)> {
    if data.is_empty() {
        return Err(Error::EmptyEvaluationSet);
    }
    if cfg.latent_dim == 0 || cfg.hidden == 0 || cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(invalid("decoder training needs positive sizes and learning rate"));
    }
    let image_shape = data.image_shape().to_vec();
    let pixels = data.pixels_per_image();
    let d = cfg.latent_dim;
    let mut enc = Network::init(image_shape.clone(), encoder_layers(pixels, cfg.hidden, d), derive_seed(cfg.seed, 1))?;
    let mut dec = Network::init(vec![d], decoder_layers(pixels, cfg.hidden, d), derive_seed(cfg.seed, 2))?;
    let mut opt: Vec<Adam> = (0..enc.params.len() + dec.params.len())
        .map(|_| Adam::new(cfg.learning_rate))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, _) = data.batch(chunk);
            let flat = Arc::new(x.clone().reshape(vec![chunk.len(), pixels])?);
            let mut tape = Tape::new();
            let xn = tape.leaf(x);
            let e = enc.record(&mut tape, xn, None)?;
            let g = dec.record(&mut tape, e.output, None)?;
            let target = tape.constant(flat);
            let diff = tape.sub(g.output, target)?;
            let sq = tape.mul(diff, diff)?;
            let loss = tape.mean(sq)?;
            let value = tape.value(loss).item().unwrap_or(f64::NAN);
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, loss: value });
            }
            let ids: Vec<NodeId> = e.params.iter().chain(&g.params).copied().collect();
            let grads = tape.backward(loss, &ids)?;
            let mut updated: Vec<Tensor> = enc.params.iter().chain(&dec.params).map(|p| (**p).clone()).collect();
            for ((p, id), o) in updated.iter_mut().zip(&ids).zip(opt.iter_mut()) {
                o.step(p, grads.get(*id).expect("parameter gradient"));
            }
            let dec_params = updated.split_off(enc.params.len());
            enc = enc.with_params(updated);
            dec = dec.with_params(dec_params);
        }
    }
    let codes = enc.forward(&data.images)?;
    let (latent_mean, latent_std) = column_stats(&codes);
    let decoder = Decoder {
        net: dec,
        image_shape,
        latent_mean,
        latent_std,
    };
    let recon = decoder.decode(&codes)?;
    let stats = reconstruction_stats(&data.images, &recon);
    Ok((decoder, stats))
}

fn column_stats(codes: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let n = codes.rows() as f64;
    let d = codes.row_len();
    let mut mean = vec![0.0; d];
    for i in 0..codes.rows() {
        for (m, v) in mean.iter_mut().zip(codes.row(i)) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; d];
    for i in 0..codes.rows() {
        for ((s, v), m) in var.iter_mut().zip(codes.row(i)).zip(&mean) {
            *s += (v - m).powi(2) / n;
        }
    }
    (mean, var.into_iter().map(|v| v.sqrt().max(1e-3)).collect())
}

fn reconstruction_stats(x: &Tensor, recon: &Tensor) -> ReconstructionStats {
    let pixels = x.row_len() as f64;
    let mut total = 0.0;
    let mut l2 = 0.0;
    for i in 0..x.rows() {
        let s: f64 = x.row(i).iter().zip(recon.row(i)).map(|(a, b)| (a - b).powi(2)).sum();
        total += s;
        l2 += s.sqrt() / pixels;
    }
    ReconstructionStats {
        rms: (total / x.numel() as f64).sqrt(),
        mean_l2: l2 / x.rows() as f64,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectionConfig {
    pub restarts: usize,
    pub steps: usize,
    /// Adam learning rate of the inner descent.
    pub step_size: f64,
    pub seed: u64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            restarts: 4,
            steps: 200,
            step_size: 0.05,
            seed: 0,
        }
    }
}

/// Projection of a batch onto the decoder's range.
#[derive(Clone, Debug)]
pub struct Projection {
    pub latents: Tensor,
    pub images: Tensor,
    /// `‖G(z*) - x‖₂²` per example.
    pub sq_distances: Vec<f64>,
}

/// Approximate `argmin_z ‖G(z) - x‖₂²` by `steps` Adam steps from each of
/// `restarts` Gaussian starting points, keeping the best per example.
///
/// Starting points depend only on the seed, and Adam acts coordinatewise,
/// so an image's projection does not depend on the rest of the batch.
pub fn project(decoder: &Decoder, x: &Tensor, cfg: &ProjectionConfig) -> Result<Projection> {
    if cfg.restarts == 0 {
        return Err(invalid("projection needs at least one restart"));
    }
    let mut want = vec![x.rows()];
    want.extend(&decoder.image_shape);
    if x.shape() != want {
        return Err(Error::Shape(format!("projection expects {want:?}, got {:?}", x.shape())));
    }
    let n = x.rows();
    let d = decoder.latent_dim();
    let target = Arc::new(x.clone());
    let mut best: Option<Projection> = None;
    for r in 0..cfg.restarts {
        let mut rng = rng_for(cfg.seed, r as u64);
        let z0: Vec<f64> = (0..d)
            .map(|j| {
                let e: f64 = StandardNormal.sample(&mut rng);
                decoder.latent_mean[j] + decoder.latent_std[j] * e
            })
            .collect();
        let mut z = Tensor::new(vec![n, d], z0.iter().copied().cycle().take(n * d).collect())?;
        let mut adam = Adam::new(cfg.step_size);
        let mut result = None;
        for t in 0..=cfg.steps {
            let mut tape = Tape::new();
            let zn = tape.leaf(z.clone());
            let g = decoder.record(&mut tape, zn)?;
            let tn = tape.constant(target.clone());
            let diff = tape.sub(g, tn)?;
            let sq = tape.mul(diff, diff)?;
            let per = tape.sum_rows(sq)?;
            if t == cfg.steps {
                result = Some((tape.value(g).clone(), tape.value(per).data().to_vec()));
                break;
            }
            let total = tape.sum(per)?;
            let grad = tape.backward(total, &[zn])?.remove(zn).expect("latent gradient");
            adam.step(&mut z, &grad);
        }
        let (images, dist) = result.expect("final evaluation");
        best = Some(match best {
            None => Projection {
                latents: z,
                images,
                sq_distances: dist,
            },
            Some(mut b) => {
                for i in 0..n {
                    if dist[i] < b.sq_distances[i] {
                        b.sq_distances[i] = dist[i];
                        b.latents.row_mut(i).copy_from_slice(z.row(i));
                        b.images.row_mut(i).copy_from_slice(images.row(i));
                    }
                }
                b
            }
        });
    }
    Ok(best.expect("at least one restart"))
}

/// Classifies `G(z*)` instead of the input, where `z*` comes from
/// [`project`]. The projection is a black box with zero true gradient.
#[derive(Clone, Debug)]
pub struct ProjectionDefense {
    pub decoder: Arc<Decoder>,
    pub config: ProjectionConfig,
}

impl ProjectionDefense {
    pub fn new(decoder: Arc<Decoder>, config: ProjectionConfig) -> Self {
        Self { decoder, config }
    }
}

impl InputStage for ProjectionDefense {
    fn name(&self) -> &str {
        "projection"
    }

    fn differentiability(&self) -> Differentiability {
        Differentiability::Shattered
    }

    fn is_stochastic(&self) -> bool {
        false
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input != self.decoder.image_shape {
            return Err(Error::Shape(format!(
                "projection produces {:?} images, got {input:?}",
                self.decoder.image_shape
            )));
        }
        Ok(input.to_vec())
    }

    fn record(&self, tape: &mut Tape, x: NodeId, draw: Draw) -> Result<StageNodes> {
        if draw != Draw::Fixed {
            return Err(invalid(format!("projection is deterministic, got draw {draw:?}")));
        }
        let decoder = self.decoder.clone();
        let cfg = self.config.clone();
        shattered_nodes(
            tape,
            x,
            ShatteredOp::new("projection", move |x| Ok(project(&decoder, x, &cfg)?.images)),
        )
    }
}

/// Records `‖G(z) - x‖₂² + c·max(margin, −κ)` per example, the objective of
/// the latent-space attack, on a tape. `z` is the latent node.
#[allow(clippy::too_many_arguments)]
pub fn record_reparameterized_loss(
    tape: &mut Tape,
    decoder: &Decoder,
    model: &DefendedModel,
    z: NodeId,
    x: &Tensor,
    goal: &Goal,
    c: &[f64],
    kappa: f64,
) -> Result<NodeId> {
    let g = decoder.record(tape, z)?;
    let trace = model.record(tape, g, &model.fixed_draw(), false)?;
    let target = tape.constant(Arc::new(x.clone()));
    let diff = tape.sub(g, target)?;
    let sq = tape.mul(diff, diff)?;
    let dist = tape.sum_rows(sq)?;
    let m = tape.margin(trace.output, goal.classes(), goal.is_targeted())?;
    let shifted = tape.affine(m, 1.0, kappa)?;
    let hinge = tape.relu(shifted)?;
    let cn = tape.constant(Arc::new(Tensor::vector(c.to_vec())));
    let weighted = tape.mul(hinge, cn)?;
    Ok(tape.add(dist, weighted)?)
}

/// Summed reparameterized objective and its gradient in `z`.
pub fn reparameterized_loss(
    decoder: &Decoder,
    model: &DefendedModel,
    z: &Tensor,
    x: &Tensor,
    goal: &Goal,
    c: &[f64],
) -> Result<(f64, Tensor)> {
    let mut tape = Tape::new();
    let zn = tape.leaf(z.clone());
    let per = record_reparameterized_loss(&mut tape, decoder, model, zn, x, goal, c, 0.0)?;
    let total = tape.sum(per)?;
    let grad = tape.backward(total, &[zn])?.remove(zn).expect("latent gradient");
    Ok((tape.value(total).item().expect("scalar"), grad))
}

struct LatentParam<'a> {
    decoder: &'a Decoder,
    z0: Tensor,
}

impl Parameterization for LatentParam<'_> {
    fn init(&self) -> Tensor {
        self.z0.clone()
    }

    fn record(&self, tape: &mut Tape, leaf: NodeId) -> Result<NodeId> {
        self.decoder.record(tape, leaf)
    }

    fn start_image(&self) -> Result<Tensor> {
        self.decoder.decode(&self.z0)
    }
}

/// Searches the decoder's range for `x' = G(z)` close to `x` that `model`
/// misclassifies, starting from the projection of `x`. Outputs lie on the
/// decoder's range exactly.
pub fn reparam_attack(
    decoder: &Decoder,
    projection: &ProjectionConfig,
    model: &DefendedModel,
    x: &Tensor,
    goal: &Goal,
    cfg: &AttackConfig,
) -> Result<Vec<AttackOutcome>> {
    let start = project(decoder, x, projection)?;
    let param = LatentParam {
        decoder,
        z0: start.latents,
    };
    let search = lagrangian_search(model, x, goal, &param, cfg)?;
    let cand = Candidate {
        images: search.images,
        iterations: search.iterations,
        losses: search.margins,
        zero_gradient: vec![false; goal.len()],
    };
    finish(model, x, goal, cand, cfg, &mut rng_for(cfg.seed, 23))
}

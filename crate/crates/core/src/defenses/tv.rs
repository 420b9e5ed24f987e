//! Total-variation minimization over a randomly masked image.

use advlab_autodiff::{NodeId, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{shattered_nodes, Differentiability, Draw, InputStage, ShatteredOp, StageNodes};
use crate::error::{invalid, Error, Result};

/// Smoothing inside `sqrt(d² + η)` so the total variation is differentiable.
const TV_SMOOTHING: f64 = 1e-3;

/// Approximately solves `min_z ‖m⊙(z−x)‖² + λ·TV(z)` by `steps` gradient
/// steps from `z = x`, where `m` keeps each pixel location with probability
/// `keep_prob` (shared across channels). Returns values clamped to `[0,1]`.
pub fn tv_minimize(
    x: &Tensor,
    keep_prob: f64,
    weight: f64,
    steps: usize,
    step_size: f64,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let [n, h, w, c] = x.shape()[..] else {
        return Err(Error::Shape(format!("tv_minimize expects NHWC input, got {:?}", x.shape())));
    };
    let mask: Vec<f64> = (0..n * h * w)
        .map(|_| if rng.random_bool(keep_prob) { 1.0 } else { 0.0 })
        .collect();
    let src = x.data();
    let mut z = src.to_vec();
    let mut grad = vec![0.0; z.len()];
    let at = |b: usize, i: usize, j: usize, ch: usize| ((b * h + i) * w + j) * c + ch;
    for _ in 0..steps {
        for b in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let m = mask[(b * h + i) * w + j];
                    for ch in 0..c {
                        let k = at(b, i, j, ch);
                        grad[k] = 2.0 * m * (z[k] - src[k]);
                    }
                }
            }
            for i in 0..h {
                for j in 0..w {
                    for ch in 0..c {
                        let k = at(b, i, j, ch);
                        for nb in [(i + 1 < h).then(|| at(b, i + 1, j, ch)), (j + 1 < w).then(|| at(b, i, j + 1, ch))]
                            .into_iter()
                            .flatten()
                        {
                            let d = z[nb] - z[k];
                            let g = weight * d / (d * d + TV_SMOOTHING).sqrt();
                            grad[nb] += g;
                            grad[k] -= g;
                        }
                    }
                }
            }
        }
        for (zi, gi) in z.iter_mut().zip(&grad) {
            *zi -= step_size * gi;
        }
    }
    for v in &mut z {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(Tensor::new(x.shape().to_vec(), z)?)
}

/// Randomized TV reconstruction stage. The inner solver is treated as a
/// black box, so its true backward pass is zero.
#[derive(Clone, Debug)]
pub struct TvMinimize {
    pub keep_prob: f64,
    pub weight: f64,
    pub steps: usize,
    pub step_size: f64,
}

impl TvMinimize {
    pub fn new(keep_prob: f64, weight: f64, steps: usize, step_size: f64) -> Result<Self> {
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(invalid(format!("tv keep_prob must be in (0,1], got {keep_prob}")));
        }
        if steps == 0 || !(weight >= 0.0) || !(step_size > 0.0) {
            return Err(invalid("tv_minimize needs steps ≥ 1, weight ≥ 0 and step_size > 0"));
        }
        Ok(Self {
            keep_prob,
            weight,
            steps,
            step_size,
        })
    }
}

impl InputStage for TvMinimize {
    fn name(&self) -> &str {
        "tv_minimize"
    }

    fn differentiability(&self) -> Differentiability {
        Differentiability::Shattered
    }

    fn is_stochastic(&self) -> bool {
        self.keep_prob < 1.0
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        Ok(input.to_vec())
    }

    fn record(&self, tape: &mut Tape, x: NodeId, draw: Draw) -> Result<StageNodes> {
        let seed = match draw {
            Draw::Seed(s) => s,
            Draw::Fixed if !self.is_stochastic() => 0,
            other => return Err(invalid(format!("tv_minimize cannot use draw {other:?}"))),
        };
        let p = self.clone();
        shattered_nodes(
            tape,
            x,
            ShatteredOp::new("tv_minimize", move |x| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                tv_minimize(x, p.keep_prob, p.weight, p.steps, p.step_size, &mut rng)
            }),
        )
    }
}

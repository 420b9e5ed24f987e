//! Randomized geometric transforms: crop-and-rescale, rescale-and-pad.

use advlab_autodiff::{NodeId, Tape, Tensor};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Differentiability, Draw, InputStage, StageNodes};
use crate::error::{invalid, Error, Result};

fn square_side(input: &[usize], who: &str) -> Result<usize> {
    match input {
        [h, w, _] if h == w => Ok(*h),
        _ => Err(Error::Shape(format!("{who} needs square [H, W, C] images, got {input:?}"))),
    }
}

fn side_of(tape: &Tape, x: NodeId, who: &str) -> Result<usize> {
    square_side(&tape.value(x).shape()[1..], who)
}

fn apply(stage: &dyn InputStage, x: &Tensor, draw: Draw) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xn = tape.leaf(x.clone());
    let out = stage.record(&mut tape, xn, draw)?.output;
    Ok(tape.value(out).clone())
}

/// Random square crop covering `fraction` of each side, resized back to the
/// input size with bilinear interpolation.
#[derive(Clone, Debug)]
pub struct CropRescale {
    fraction: f64,
}

impl CropRescale {
    pub fn new(fraction: f64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(invalid(format!("crop fraction must be in (0,1], got {fraction}")));
        }
        Ok(Self { fraction })
    }

    pub fn crop_size(&self, side: usize) -> usize {
        ((self.fraction * side as f64).round() as usize).clamp(1, side)
    }

    /// Crop offset `(top, left)` for a draw.
    pub fn offset(&self, side: usize, draw: Draw) -> Result<(usize, usize)> {
        let slack = side - self.crop_size(side) + 1;
        match draw {
            Draw::Seed(s) => {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                Ok((rng.random_range(0..slack), rng.random_range(0..slack)))
            }
            Draw::Pattern(p) if p < slack * slack => Ok((p / slack, p % slack)),
            Draw::Fixed if slack == 1 => Ok((0, 0)),
            other => Err(invalid(format!("crop_rescale cannot use draw {other:?}"))),
        }
    }
}

impl InputStage for CropRescale {
    fn name(&self) -> &str {
        "crop_rescale"
    }

    fn differentiability(&self) -> Differentiability {
        Differentiability::Differentiable
    }

    fn is_stochastic(&self) -> bool {
        self.fraction < 1.0
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        square_side(input, "crop_rescale")?;
        Ok(input.to_vec())
    }

    fn record(&self, tape: &mut Tape, x: NodeId, draw: Draw) -> Result<StageNodes> {
        let side = side_of(tape, x, "crop_rescale")?;
        let size = self.crop_size(side);
        let (top, left) = self.offset(side, draw)?;
        let cropped = tape.crop(x, top, left, size, size)?;
        let output = tape.resize_bilinear(cropped, side, side)?;
        Ok(StageNodes {
            output,
            shattered: None,
        })
    }

    fn patterns(&self, input: &[usize]) -> Option<Vec<f64>> {
        let side = square_side(input, "crop_rescale").ok()?;
        let slack = side - self.crop_size(side) + 1;
        Some(vec![1.0 / (slack * slack) as f64; slack * slack])
    }
}

/// One random crop-and-rescale of a whole batch.
pub fn crop_rescale(x: &Tensor, fraction: f64, rng: &mut impl RngCore) -> Result<Tensor> {
    apply(&CropRescale::new(fraction)?, x, Draw::Seed(rng.next_u64()))
}

/// Random nearest-neighbour upscale to `r×r` with `r` uniform in
/// `[h, out_size)`, placed at a uniform offset on a zero canvas.
#[derive(Clone, Debug)]
pub struct RescalePad {
    out_size: usize,
}

/// One realization of [`RescalePad`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RescalePadDraw {
    pub size: usize,
    pub top: usize,
    pub left: usize,
}

impl RescalePad {
    pub fn new(out_size: usize) -> Self {
        Self { out_size }
    }

    fn check(&self, side: usize) -> Result<()> {
        if self.out_size <= side {
            return Err(invalid(format!(
                "rescale_pad output size {} must exceed the input side {side}",
                self.out_size
            )));
        }
        Ok(())
    }

    /// All realizations in pattern order, with their probabilities.
    pub fn enumerate(&self, side: usize) -> Result<Vec<(RescalePadDraw, f64)>> {
        self.check(side)?;
        let s = self.out_size;
        let p_size = 1.0 / (s - side) as f64;
        let mut out = Vec::new();
        for size in side..s {
            let slack = s - size + 1;
            let p = p_size / (slack * slack) as f64;
            for top in 0..slack {
                for left in 0..slack {
                    out.push((RescalePadDraw { size, top, left }, p));
                }
            }
        }
        Ok(out)
    }

    pub fn resolve(&self, side: usize, draw: Draw) -> Result<RescalePadDraw> {
        self.check(side)?;
        match draw {
            Draw::Seed(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let size = rng.random_range(side..self.out_size);
                let slack = self.out_size - size + 1;
                Ok(RescalePadDraw {
                    size,
                    top: rng.random_range(0..slack),
                    left: rng.random_range(0..slack),
                })
            }
            Draw::Pattern(p) => self
                .enumerate(side)?
                .get(p)
                .map(|(d, _)| *d)
                .ok_or_else(|| invalid(format!("rescale_pad has no pattern {p}"))),
            Draw::Fixed => Err(invalid("rescale_pad is randomized and needs a draw")),
        }
    }

    /// Records one explicit realization.
    pub fn record_draw(&self, tape: &mut Tape, x: NodeId, d: RescalePadDraw) -> Result<NodeId> {
        let resized = tape.resize_nearest(x, d.size, d.size)?;
        Ok(tape.pad(resized, d.top, d.left, self.out_size, self.out_size)?)
    }
}

impl InputStage for RescalePad {
    fn name(&self) -> &str {
        "rescale_pad"
    }

    fn differentiability(&self) -> Differentiability {
        Differentiability::Differentiable
    }

    fn is_stochastic(&self) -> bool {
        true
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let side = square_side(input, "rescale_pad")?;
        self.check(side)?;
        Ok(vec![self.out_size, self.out_size, input[2]])
    }

    fn record(&self, tape: &mut Tape, x: NodeId, draw: Draw) -> Result<StageNodes> {
        let side = side_of(tape, x, "rescale_pad")?;
        let d = self.resolve(side, draw)?;
        Ok(StageNodes {
            output: self.record_draw(tape, x, d)?,
            shattered: None,
        })
    }

    fn patterns(&self, input: &[usize]) -> Option<Vec<f64>> {
        let side = square_side(input, "rescale_pad").ok()?;
        Some(self.enumerate(side).ok()?.into_iter().map(|(_, p)| p).collect())
    }
}

/// One random rescale-and-pad of a whole batch.
pub fn random_rescale_pad(x: &Tensor, out_size: usize, rng: &mut impl RngCore) -> Result<Tensor> {
    apply(&RescalePad::new(out_size), x, Draw::Seed(rng.next_u64()))
}

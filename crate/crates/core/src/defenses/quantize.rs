//! Value quantizers: bit-depth reduction and a block-DCT compression proxy.

use std::sync::OnceLock;

use advlab_autodiff::{NodeId, Tape, Tensor};

use super::{shattered_nodes, Differentiability, Draw, InputStage, ShatteredOp, StageNodes};
use crate::error::{invalid, Error, Result};

/// Rounds every value to the nearest of `2^b` evenly spaced levels in `[0,1]`.
pub fn bit_depth_reduce(x: &Tensor, bits: u32) -> Tensor {
    let levels = ((1u32 << bits) - 1) as f64;
    x.map(|v| (v.clamp(0.0, 1.0) * levels).round() / levels)
}

#[derive(Clone, Debug)]
pub struct BitDepth {
    bits: u32,
}

impl BitDepth {
    pub fn new(bits: u32) -> Result<Self> {
        if !(1..=8).contains(&bits) {
            return Err(invalid(format!("bit depth must be in 1..=8, got {bits}")));
        }
        Ok(Self { bits })
    }
}

impl InputStage for BitDepth {
    fn name(&self) -> &str {
        "bit_depth"
    }

    fn differentiability(&self) -> Differentiability {
        Differentiability::Shattered
    }

    fn is_stochastic(&self) -> bool {
        false
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        Ok(input.to_vec())
    }

    fn record(&self, tape: &mut Tape, x: NodeId, _draw: Draw) -> Result<StageNodes> {
        let b = self.bits;
        shattered_nodes(tape, x, ShatteredOp::new("bit_depth", move |x| Ok(bit_depth_reduce(x, b))))
    }
}

const BLOCK: usize = 8;

/// Baseline luminance quantization table, in 0..255 pixel units.
const LUMA: [[f64; 8]; 8] = [
    [16., 11., 10., 16., 24., 40., 51., 61.],
    [12., 12., 14., 19., 26., 58., 60., 55.],
    [14., 13., 16., 24., 40., 57., 69., 56.],
    [14., 17., 22., 29., 51., 87., 80., 62.],
    [18., 22., 37., 56., 68., 109., 103., 77.],
    [24., 35., 55., 64., 81., 104., 113., 92.],
    [49., 64., 78., 87., 103., 121., 120., 101.],
    [72., 92., 95., 98., 112., 100., 103., 99.],
];

/// Smallest quantization step, reached at quality 100.
const MIN_STEP: f64 = 1e-9;

/// Orthonormal DCT-II basis, `D[u][i]`.
fn dct_basis() -> &'static [[f64; 8]; 8] {
    static BASIS: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut d = [[0.0; 8]; 8];
        for (u, row) in d.iter_mut().enumerate() {
            let a = if u == 0 { (1.0 / 8.0f64).sqrt() } else { (2.0 / 8.0f64).sqrt() };
            for (i, v) in row.iter_mut().enumerate() {
                *v = a * (std::f64::consts::PI * (2 * i + 1) as f64 * u as f64 / 16.0).cos();
            }
        }
        d
    })
}

/// Quantization step for coefficient `(u, v)` at quality `q`, in `[0,1]` units.
pub fn quant_step(q: u32, u: usize, v: usize) -> f64 {
    let q = q.clamp(1, 100) as f64;
    let scale = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    (LUMA[u][v] * scale / 100.0 / 255.0).max(MIN_STEP)
}

/// 2-D orthonormal DCT of an 8×8 block.
pub fn dct8(block: &[f64; 64]) -> [f64; 64] {
    let d = dct_basis();
    let mut tmp = [0.0; 64];
    let mut out = [0.0; 64];
    for u in 0..8 {
        for j in 0..8 {
            tmp[u * 8 + j] = (0..8).map(|i| d[u][i] * block[i * 8 + j]).sum();
        }
    }
    for u in 0..8 {
        for v in 0..8 {
            out[u * 8 + v] = (0..8).map(|j| tmp[u * 8 + j] * d[v][j]).sum();
        }
    }
    out
}

pub fn idct8(coef: &[f64; 64]) -> [f64; 64] {
    let d = dct_basis();
    let mut tmp = [0.0; 64];
    let mut out = [0.0; 64];
    for i in 0..8 {
        for v in 0..8 {
            tmp[i * 8 + v] = (0..8).map(|u| d[u][i] * coef[u * 8 + v]).sum();
        }
    }
    for i in 0..8 {
        for j in 0..8 {
            out[i * 8 + j] = (0..8).map(|v| tmp[i * 8 + v] * d[v][j]).sum();
        }
    }
    out
}

/// Per-block DCT, uniform scalar quantization of each coefficient with a
/// quality-scaled step, inverse DCT, clamp to `[0,1]`. Input is NHWC with H
/// and W multiples of 8; channels are processed independently.
pub fn jpeg_proxy(x: &Tensor, quality: u32) -> Result<Tensor> {
    jpeg_impl(x, quality, true)
}

fn jpeg_impl(x: &Tensor, quality: u32, clamp: bool) -> Result<Tensor> {
    let [n, h, w, c] = x.shape()[..] else {
        return Err(Error::Shape(format!("jpeg_proxy expects NHWC input, got {:?}", x.shape())));
    };
    if h % BLOCK != 0 || w % BLOCK != 0 {
        return Err(Error::Shape(format!("jpeg_proxy needs H and W divisible by 8, got {h}×{w}")));
    }
    let mut steps = [0.0; 64];
    for u in 0..8 {
        for v in 0..8 {
            steps[u * 8 + v] = quant_step(quality, u, v);
        }
    }
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    let at = |b: usize, i: usize, j: usize, ch: usize| ((b * h + i) * w + j) * c + ch;
    for b in 0..n {
        for ch in 0..c {
            for bi in (0..h).step_by(BLOCK) {
                for bj in (0..w).step_by(BLOCK) {
                    let mut block = [0.0; 64];
                    for i in 0..8 {
                        for j in 0..8 {
                            block[i * 8 + j] = src[at(b, bi + i, bj + j, ch)];
                        }
                    }
                    let mut coef = dct8(&block);
                    for (k, cf) in coef.iter_mut().enumerate() {
                        *cf = (*cf / steps[k]).round() * steps[k];
                    }
                    let rec = idct8(&coef);
                    for i in 0..8 {
                        for j in 0..8 {
                            let v = rec[i * 8 + j];
                            out[at(b, bi + i, bj + j, ch)] = if clamp { v.clamp(0.0, 1.0) } else { v };
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::new(x.shape().to_vec(), out)?)
}

#[derive(Clone, Debug)]
pub struct JpegProxy {
    quality: u32,
}

impl JpegProxy {
    pub fn new(quality: u32) -> Result<Self> {
        if !(1..=100).contains(&quality) {
            return Err(invalid(format!("jpeg quality must be in 1..=100, got {quality}")));
        }
        Ok(Self { quality })
    }
}

impl InputStage for JpegProxy {
    fn name(&self) -> &str {
        "jpeg_proxy"
    }

    fn differentiability(&self) -> Differentiability {
        Differentiability::Shattered
    }

    fn is_stochastic(&self) -> bool {
        false
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match input {
            [h, w, _] if h % BLOCK == 0 && w % BLOCK == 0 => Ok(input.to_vec()),
            _ => Err(Error::Shape(format!("jpeg_proxy needs H and W divisible by 8, got {input:?}"))),
        }
    }

    fn record(&self, tape: &mut Tape, x: NodeId, _draw: Draw) -> Result<StageNodes> {
        let q = self.quality;
        shattered_nodes(tape, x, ShatteredOp::new("jpeg_proxy", move |x| jpeg_proxy(x, q)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bit_depth_examples() {
        let one = bit_depth_reduce(&Tensor::vector(vec![0.6]), 1);
        assert_eq!(one.data(), &[1.0]);
        let three = bit_depth_reduce(&Tensor::vector(vec![0.5]), 3);
        assert!((three.data()[0] - 4.0 / 7.0).abs() < 1e-12);
        let eight: Vec<f64> = (0..=255).map(|i| i as f64 / 255.0).collect();
        let t = Tensor::vector(eight.clone());
        assert_eq!(bit_depth_reduce(&t, 8).data(), t.data());
    }

    #[test]
    fn dct_round_trip() {
        let block: [f64; 64] = std::array::from_fn(|i| ((i * 37) % 11) as f64 / 10.0);
        let back = idct8(&dct8(&block));
        for (a, b) in block.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_image_survives() {
        let x = Tensor::full(&[1, 16, 8, 1], 0.4);
        let y = jpeg_proxy(&x, 10).unwrap();
        for v in y.data() {
            // DC step at quality 10 is 80/255; the constant only moves by
            // the rounding of its own DC coefficient.
            assert!((v - 0.4).abs() <= 0.5 * quant_step(10, 0, 0) / 8.0 + 1e-12);
        }
        let exact = Tensor::full(&[1, 8, 8, 1], 0.5);
        let dc_step = quant_step(50, 0, 0);
        let aligned = (4.0 / dc_step).round() * dc_step / 8.0;
        let x = Tensor::full(&[1, 8, 8, 1], aligned);
        let y = jpeg_proxy(&x, 50).unwrap();
        for v in y.data() {
            assert!((v - aligned).abs() < 1e-12);
        }
        assert_eq!(jpeg_proxy(&exact, 100).unwrap().shape(), exact.shape());
    }

    #[test]
    fn quality_100_is_near_lossless() {
        let data: Vec<f64> = (0..128).map(|i| ((i * 29) % 17) as f64 / 16.0).collect();
        let x = Tensor::new(vec![2, 8, 8, 1], data).unwrap();
        let y = jpeg_proxy(&x, 100).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn low_quality_flattens_checkerboard() {
        let data: Vec<f64> = (0..64).map(|k| if (k / 8 + k % 8) % 2 == 0 { 0.6 } else { 0.4 }).collect();
        let block: [f64; 64] = data.clone().try_into().unwrap();
        let coef = dct8(&block);
        let hi = coef[63];
        assert!(hi.abs() > 0.5, "checkerboard carries high-frequency energy ({hi})");
        assert_eq!((hi / quant_step(10, 7, 7)).round(), 0.0);
        let x = Tensor::new(vec![1, 8, 8, 1], data).unwrap();
        let y = jpeg_proxy(&x, 10).unwrap();
        let dev = |t: &Tensor| t.data().iter().map(|v| (v - 0.5).abs()).sum::<f64>();
        assert!(dev(&y) < dev(&x));
        let ycoef = dct8(&y.data().try_into().unwrap());
        assert!(ycoef[63].abs() < 1e-9);
    }

    #[test]
    fn rejects_unaligned_input() {
        assert!(jpeg_proxy(&Tensor::zeros(&[1, 12, 8, 1]), 50).is_err());
    }

    proptest! {
        #[test]
        fn bit_depth_is_idempotent(xs in prop::collection::vec(0.0f64..=1.0, 1..32), b in 1u32..=8) {
            let x = Tensor::vector(xs);
            let once = bit_depth_reduce(&x, b);
            let twice = bit_depth_reduce(&once, b);
            prop_assert_eq!(twice.data(), once.data());
        }

        #[test]
        fn jpeg_is_idempotent_up_to_clipping(xs in prop::collection::vec(0.0f64..=1.0, 64), q in 20u32..=95) {
            // Without clipping the output coefficients are exact multiples of
            // the steps and a second pass changes nothing; clipping can move
            // the second pass by at most twice the clipped distance.
            let x = Tensor::new(vec![1, 8, 8, 1], xs).unwrap();
            let raw = jpeg_impl(&x, q, false).unwrap();
            let once = jpeg_proxy(&x, q).unwrap();
            let twice = jpeg_proxy(&once, q).unwrap();
            let dist = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
            prop_assert!(dist(&twice, &once) <= 2.0 * dist(&once, &raw) + 1e-9);
        }
    }
}

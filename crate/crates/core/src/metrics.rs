//! Distortion metrics in normalized `[0,1]` pixel units.

use advlab_autodiff::Tensor;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("distortion needs equal sizes, got {} and {}", x.len(), y.len())));
    }
    if x.is_empty() {
        return Err(Error::Shape("distortion of an empty image".into()));
    }
    Ok(())
}

/// `max |x - x'|`.
pub fn linf(x: &[f64], adv: &[f64]) -> Result<f64> {
    check(x, adv)?;
    Ok(x.iter().zip(adv).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

/// Un-normalized `‖x - x'‖₂`.
pub fn l2_raw(x: &[f64], adv: &[f64]) -> Result<f64> {
    check(x, adv)?;
    Ok(x.iter().zip(adv).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
}

/// `‖x - x'‖₂ / N` with `N` the number of pixel values.
pub fn l2(x: &[f64], adv: &[f64]) -> Result<f64> {
    Ok(l2_raw(x, adv)? / x.len() as f64)
}

/// Root-mean-square perturbation `‖x - x'‖₂ / √N`.
pub fn rms(x: &[f64], adv: &[f64]) -> Result<f64> {
    Ok(l2_raw(x, adv)? / (x.len() as f64).sqrt())
}

pub fn linf_distortion(x: &Tensor, adv: &Tensor) -> Result<f64> {
    same_shape(x, adv)?;
    linf(x.data(), adv.data())
}

pub fn l2_distortion(x: &Tensor, adv: &Tensor) -> Result<f64> {
    same_shape(x, adv)?;
    l2(x.data(), adv.data())
}

fn same_shape(x: &Tensor, adv: &Tensor) -> Result<()> {
    if x.shape() != adv.shape() {
        return Err(Error::Shape(format!("distortion between {:?} and {:?}", x.shape(), adv.shape())));
    }
    Ok(())
}

pub fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    Some(if s.len().is_multiple_of(2) { (s[m - 1] + s[m]) / 2.0 } else { s[m] })
}

/// Aggregates of a per-image score matrix `f[attack][image]`, e.g. the
/// defended model's correctness after each attack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestPerImage {
    /// `mean_x min_a f(a(x))`: every image meets its strongest attack.
    pub mean_of_min: f64,
    /// `min_a mean_x f(a(x))`: the strongest single attack.
    pub min_of_mean: f64,
    /// Index of the attack attaining `min_of_mean` (first on ties).
    pub best_attack: usize,
    /// Per-image minimum over attacks.
    pub per_image: Vec<f64>,
}

pub fn best_per_image(matrix: &[Vec<f64>]) -> Result<BestPerImage> {
    let n = match matrix.first() {
        Some(row) if !row.is_empty() => row.len(),
        _ => return Err(Error::EmptyEvaluationSet),
    };
    if let Some((a, row)) = matrix.iter().enumerate().find(|(_, r)| r.len() != n) {
        return Err(Error::Shape(format!(
            "ragged outcome matrix: attack 0 has {n} images, attack {a} has {}",
            row.len()
        )));
    }
    let per_image: Vec<f64> = (0..n)
        .map(|i| matrix.iter().map(|r| r[i]).fold(f64::INFINITY, f64::min))
        .collect();
    let means: Vec<f64> = matrix.iter().map(|r| r.iter().sum::<f64>() / n as f64).collect();
    let mut best_attack = 0;
    for (a, m) in means.iter().enumerate() {
        if *m < means[best_attack] {
            best_attack = a;
        }
    }
    Ok(BestPerImage {
        mean_of_min: per_image.iter().sum::<f64>() / n as f64,
        min_of_mean: means[best_attack],
        best_attack,
        per_image,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn linf_examples() {
        let x = Tensor::full(&[1, 4, 4, 1], 0.25);
        let adv = x.map(|v| v + 8.0 / 256.0);
        assert_eq!(linf_distortion(&x, &adv).unwrap(), 0.03125);
        assert_eq!(linf_distortion(&x, &x).unwrap(), 0.0);
        let mut one = x.clone();
        one.data_mut()[3] += 0.5;
        assert_eq!(linf_distortion(&x, &one).unwrap(), 0.5);
    }

    #[test]
    fn l2_examples() {
        let x = Tensor::zeros(&[1, 16, 16, 1]);
        let mut adv = x.clone();
        assert_eq!(l2_distortion(&x, &adv).unwrap(), 0.0);
        adv.data_mut()[17] = 1.0;
        assert!((l2_distortion(&x, &adv).unwrap() - 0.00390625).abs() < 1e-12);
        assert!((rms(x.data(), adv.data()).unwrap() - 1.0 / 16.0).abs() < 1e-12);
        assert!(l2_distortion(&x, &Tensor::zeros(&[1, 8, 8, 1])).is_err());
    }

    #[test]
    fn normalization_matches_28_by_28_pairing() {
        let normalized = 1.45 / 784.0;
        assert!((normalized - 0.0019f64).abs() / 0.0019 < 0.03);
    }

    #[test]
    fn median_of_even_count() {
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), Some(2.5));
        assert_eq!(mean(&[]), None);
    }

    #[test]
    fn complementary_attacks() {
        let r = best_per_image(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(r.mean_of_min, 0.0);
        assert_eq!(r.min_of_mean, 0.5);
        assert_eq!(r.per_image, vec![0.0, 0.0]);
    }

    #[test]
    fn single_attack_aggregates_agree() {
        let r = best_per_image(&[vec![1.0, 0.0, 1.0]]).unwrap();
        assert_eq!(r.mean_of_min, r.min_of_mean);
    }

    #[test]
    fn ragged_and_empty_rejected() {
        assert!(matches!(best_per_image(&[vec![1.0], vec![1.0, 0.0]]), Err(Error::Shape(_))));
        assert!(best_per_image(&[]).is_err());
        assert!(best_per_image(&[vec![]]).is_err());
    }

    proptest! {
        #[test]
        fn mean_of_min_never_exceeds_min_of_mean(
            m in (1usize..6, 1usize..20).prop_flat_map(|(a, n)| prop::collection::vec(prop::collection::vec(0.0f64..1.0, n), a))
        ) {
            let r = best_per_image(&m).unwrap();
            prop_assert!(r.mean_of_min <= r.min_of_mean + 1e-12);
            for (a, row) in m.iter().enumerate() {
                for (i, v) in row.iter().enumerate() {
                    prop_assert!(r.per_image[i] <= *v, "attack {} image {}", a, i);
                }
            }
        }
    }
}

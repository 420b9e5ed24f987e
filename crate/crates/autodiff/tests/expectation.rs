use advlab_autodiff::{
    expectation_gradient, expectation_value_and_gradient, value_and_gradient, weighted_expectation_value_and_gradient,
    AutodiffError, Tape, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn quartic(t: &mut Tape, x: advlab_autodiff::NodeId) -> advlab_autodiff::Result<advlab_autodiff::NodeId> {
    let sq = t.mul(x, x)?;
    let q = t.mul(sq, sq)?;
    let s = t.tanh(q)?;
    t.sum(s)
}

#[test]
fn point_mass_equals_single_backward_exactly() {
    let x = Tensor::vector(vec![0.3, -0.7, 1.1]);
    let single = value_and_gradient(quartic, &x).unwrap();
    for k in [1, 3, 10] {
        let est = expectation_value_and_gradient(|t, x, _| quartic(t, x), &x, k).unwrap();
        assert_eq!(est.gradient, single.gradient);
        assert_eq!(est.value, single.value);
    }
}

#[test]
fn full_enumeration_of_two_linear_maps_matches_closed_form() {
    let a1 = Tensor::new(vec![2, 3], vec![1.0, 2.0, -1.0, 0.5, 0.0, 3.0]).unwrap();
    let a2 = Tensor::new(vec![2, 3], vec![-2.0, 1.0, 0.0, 1.5, -1.0, 0.25]).unwrap();
    let x = Tensor::new(vec![1, 2], vec![0.4, -0.9]).unwrap();
    let maps = [a1.clone(), a2.clone()];
    // f(u) = Σ tanh(u), so the upstream gradient is 1 - tanh²(x·A).
    let est = expectation_gradient(
        |t, xn, i| {
            let a = t.leaf(maps[i].clone());
            let u = t.matmul(xn, a)?;
            let v = t.tanh(u)?;
            t.sum(v)
        },
        &x,
        2,
    )
    .unwrap();

    let mut expected = [0.0; 2];
    for a in &maps {
        for j in 0..3 {
            let u = x.data()[0] * a.data()[j] + x.data()[1] * a.data()[3 + j];
            let g = 1.0 - u.tanh().powi(2);
            expected[0] += 0.5 * a.data()[j] * g;
            expected[1] += 0.5 * a.data()[3 + j] * g;
        }
    }
    for (e, g) in expected.iter().zip(est.data()) {
        assert!((e - g).abs() <= 1e-14, "{e} vs {g}");
    }
}

#[test]
fn sampling_converges_to_expectation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::scalar(0.5);
    // E_s[d/dx (s·x)²] = 2x·E[s²] = 2·0.5·(1/3) for s ~ U(-1, 1).
    let g = expectation_gradient(
        |t, xn, _| {
            let s = t.leaf(Tensor::scalar(rng.random_range(-1.0..1.0)));
            let u = t.mul(s, xn)?;
            t.mul(u, u)
        },
        &x,
        20_000,
    )
    .unwrap();
    assert!((g.item().unwrap() - 1.0 / 3.0).abs() < 0.01);
}

#[test]
fn failing_draw_reports_its_index() {
    let x = Tensor::scalar(1.0);
    let err = expectation_gradient(
        |t, xn, i| {
            if i == 3 {
                let z = t.leaf(Tensor::scalar(0.0));
                t.log(z)
            } else {
                Ok(xn)
            }
        },
        &x,
        5,
    )
    .unwrap_err();
    assert!(matches!(err, AutodiffError::Draw { index: 3, .. }), "{err}");
}

#[test]
fn zero_samples_is_an_error() {
    let x = Tensor::scalar(1.0);
    assert!(expectation_gradient(|_t, xn, _| Ok::<_, AutodiffError>(xn), &x, 0).is_err());
}

#[test]
fn weighted_enumeration_matches_weighted_closed_form() {
    // d/dx (a·x)² = 2a²x, weighted by the draw probabilities.
    let coefs = [1.0, -2.0, 0.5];
    let weights = [0.5, 0.125, 0.375];
    let x = Tensor::scalar(0.8);
    let est = weighted_expectation_value_and_gradient(
        |t, xn, i| {
            let a = t.leaf(Tensor::scalar(coefs[i]));
            let u = t.mul(a, xn)?;
            t.mul(u, u)
        },
        &x,
        &weights,
    )
    .unwrap();
    let expect: f64 = coefs.iter().zip(&weights).map(|(a, w)| w * 2.0 * a * a * 0.8).sum();
    assert!((est.gradient.item().unwrap() - expect).abs() < 1e-14);
    assert!(weighted_expectation_value_and_gradient(|_t, xn, _| Ok::<_, AutodiffError>(xn), &x, &[0.0, 0.0]).is_err());
}

mod common;

use camlab::cam;
use camlab::distortion::{apply_additive_shift, apply_sign_collapse};
use camlab::model::Head;
use camlab::{ops, Tensor};
use common::*;
use proptest::prelude::*;
use rand::Rng;

fn random_head(g: &mut rand_chacha::ChaCha8Rng, n: usize, c: usize) -> Head<f64> {
    Head::new(uniform(g, &[n, c], -1.0, 1.0), uniform(g, &[c], -0.5, 0.5)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn additive_shift_keeps_probabilities_and_moves_maps_linearly(
        seed in any::<u64>(),
        delta in -5.0f64..5.0,
    ) {
        let mut g = rng(seed);
        let (n, c, p) = (g.gen_range(1..9), g.gen_range(2..6), g.gen_range(1..5));
        let head = random_head(&mut g, n, c);
        let channel = g.gen_range(0..n);
        let shifted = apply_additive_shift(&head, channel, delta).unwrap();
        let features = uniform(&mut g, &[1, n, p, p], 0.0, 3.0);

        let before = ops::softmax_rows(&head.logits(&features).unwrap()).unwrap();
        let after = ops::softmax_rows(&shifted.logits(&features).unwrap()).unwrap();
        prop_assert!(before.max_abs_diff(&after) < 1e-12);

        let f = features.clone().reshape([n, p, p]).unwrap();
        for k in 0..c {
            let m = cam::vanilla_cam(&head, k, &f).unwrap();
            let m2 = cam::vanilla_cam(&shifted, k, &f).unwrap();
            let fi = f.outer(channel);
            for ((a, b), x) in m2.data().iter().zip(m.data()).zip(fi) {
                prop_assert!(((a - b) - delta * x).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sign_collapse_keeps_probabilities_and_negates_every_weight(
        seed in any::<u64>(),
        scale in 1.0001f64..10.0,
    ) {
        let mut g = rng(seed);
        let (n, c) = (g.gen_range(1..9), g.gen_range(2..6));
        let head = random_head(&mut g, n, c);
        let max = head.weight.data().iter().fold(0.0f64, |m, w| m.max(w.abs()));
        let collapsed = apply_sign_collapse(&head, scale * max).unwrap();
        prop_assert!(collapsed.weight.data().iter().all(|&w| w < 0.0));
        prop_assert!(collapsed.bias.bits_eq(&head.bias));

        let features = uniform(&mut g, &[2, n, 2, 2], 0.0, 3.0);
        let before = ops::softmax_rows(&head.logits(&features).unwrap()).unwrap();
        let after = ops::softmax_rows(&collapsed.logits(&features).unwrap()).unwrap();
        prop_assert!(before.max_abs_diff(&after) < 1e-12);

        // with non-negative features every collapsed map is non-positive
        let f = features.outer_tensor(0);
        for k in 0..c {
            let m = cam::vanilla_cam(&collapsed, k, &f).unwrap();
            prop_assert!(m.data().iter().all(|&v| v <= 0.0));
        }
    }
}

#[test]
fn invalid_magnitudes_are_rejected() {
    let head: Head<f64> = Head::zeros(3, 2);
    assert!(apply_sign_collapse(&head, -1.0).is_err());
    assert!(apply_sign_collapse(&head, f64::NAN).is_err());
    assert!(apply_additive_shift(&head, 3, 1.0).is_err());
    assert!(apply_additive_shift(&head, 0, f64::INFINITY).is_err());
    let same = apply_additive_shift(&head, 1, 0.0).unwrap();
    assert!(same.weight.bits_eq(&Tensor::zeros([3, 2])));
}

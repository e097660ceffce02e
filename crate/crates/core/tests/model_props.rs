mod common;

use common::*;
use patchcert::model::softmax_cross_entropy;
use patchcert::sin::{forward_with_mask, pruned_forward, SinMask};
use patchcert::{Coord, Model, SinConfig, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn close(a: f32, b: f64) -> bool {
    (f64::from(a) - b).abs() <= 1e-4 * (1.0 + b.abs())
}

#[test]
fn plain_cnn_matches_reference_on_constant_input() {
    let model = Model::plain_cnn(patchcert::InputDims::new(3, 8, 8), 5, (4, 6), 7).unwrap();
    let x = Tensor::filled(&[3, 8, 8], 1.0);
    let got = model.forward(&x, false).unwrap().logits;
    let want = ref_forward(&model, &params_of(&model), &x, None);
    for (a, b) in got.data().iter().zip(&want) {
        assert!((f64::from(*a) - b).abs() < 1e-5, "{a} vs {b}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forward_matches_reference(seed in any::<u64>()) {
        let mut r = rng(seed);
        let c = r.gen_range(1..=3);
        let (h, w) = (r.gen_range(6..=12), r.gen_range(6..=12));
        let model = tiny_model(&mut r, c, h, w, 3);
        let x = random_image(&mut r, c, h, w);
        let got = model.forward(&x, false).unwrap().logits;
        let want = ref_forward(&model, &params_of(&model), &x, None);
        for (a, b) in got.data().iter().zip(&want) {
            prop_assert!(close(*a, *b), "{} vs {}", a, b);
        }
    }

    #[test]
    fn masked_forward_matches_reference(seed in any::<u64>()) {
        let mut r = rng(seed);
        let model = tiny_model(&mut r, 2, 9, 9, 3);
        let x = random_image(&mut r, 2, 9, 9);
        let (sh, sw) = model.superficial_extent();
        let winners: Vec<Coord> = (0..sh * sw)
            .filter(|_| r.gen_bool(0.3))
            .map(|i| Coord::new(i / sw, i % sw))
            .collect();
        let mask = SinMask::from_winners(sh, sw, winners);
        let got = forward_with_mask(&model, &x, &mask, false).unwrap().logits;
        let want = ref_forward(&model, &params_of(&model), &x, Some((model.superficial_layer(), mask.grid())));
        for (a, b) in got.data().iter().zip(&want) {
            prop_assert!(close(*a, *b), "{} vs {}", a, b);
        }
    }

    #[test]
    fn full_winner_rate_is_the_plain_network(seed in any::<u64>()) {
        let mut r = rng(seed);
        let model = tiny_model(&mut r, 1, 8, 10, 4);
        let x = random_image(&mut r, 1, 8, 10);
        let cfg = SinConfig::for_model(&model, 1.0).unwrap();
        let (pruned, mask) = pruned_forward(&model, &x, &cfg, None, false).unwrap();
        let plain = model.forward(&x, false).unwrap();
        prop_assert_eq!(mask.popcount(), mask.height() * mask.width());
        prop_assert_eq!(pruned.logits.data(), plain.logits.data());
    }

    #[test]
    fn parameter_gradients_match_finite_differences(seed in any::<u64>()) {
        let mut r = rng(seed);
        let model = tiny_model(&mut r, 2, 7, 7, 3);
        let x = random_image(&mut r, 2, 7, 7);
        let label = r.gen_range(0..3);
        let trace = model.forward(&x, true).unwrap();
        let (_, dlogits) = softmax_cross_entropy(trace.logits.data(), label);
        let grads = model.backward(&trace, &dlogits).unwrap();
        let base = params_of(&model);
        let eps = 1e-6;
        for (i, g) in grads.params.iter().enumerate() {
            let Some(g) = g else { continue };
            for (part, analytic) in [(0usize, g.weight.data()), (1, g.bias.data())] {
                for j in 0..analytic.len() {
                    let mut plus = base.clone();
                    let mut minus = base.clone();
                    if part == 0 { plus[i].0[j] += eps; minus[i].0[j] -= eps; }
                    else { plus[i].1[j] += eps; minus[i].1[j] -= eps; }
                    let numeric = (ref_cross_entropy(&ref_forward(&model, &plus, &x, None), label)
                        - ref_cross_entropy(&ref_forward(&model, &minus, &x, None), label)) / (2.0 * eps);
                    let a = f64::from(analytic[j]);
                    prop_assert!((a - numeric).abs() <= 1e-4 * numeric.abs().max(1e-3),
                        "layer {} part {} idx {}: {} vs {}", i, part, j, a, numeric);
                }
            }
        }
    }
}

#[test]
fn gradients_independent_of_thread_count() {
    let mut r = rng(11);
    let model = tiny_model(&mut r, 3, 10, 10, 4);
    let data: Vec<Tensor> = (0..16).map(|_| random_image(&mut r, 3, 10, 10)).collect();
    let labels: Vec<usize> = (0..16).map(|i| i % 4).collect();
    let ds = patchcert::Dataset::new(model.input_dims(), 4, data, labels).unwrap();
    let cfg = patchcert::train::TrainConfig {
        epochs: 2,
        batch_size: 8,
        ..Default::default()
    };
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let mut m = model.clone();
            patchcert::train::train(&mut m, &ds, &cfg).unwrap();
            m
        })
    };
    assert_eq!(run(1), run(3));
}

mod support;

use cohesion_core::capsnet::{dynamic_routing, margin_loss, squash, squash_vector, MarginLossConfig};
use cohesion_core::graph::Graph;
use cohesion_core::rng::seeded;
use proptest::prelude::*;
use rand::Rng;
use support::reference_routing;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Runs engine routing on one example and returns outputs plus the
/// couplings of every iteration.
fn engine_routing(u_hat: &[f64], l: usize, u: usize, d: usize, iters: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut g = Graph::<f64>::new();
    let p = g.constant_from(&[1, l, u, d], u_hat.to_vec()).unwrap();
    let routed = dynamic_routing(&mut g, p, iters).unwrap();
    let couplings = routed.states(&g, 0).into_iter().map(|s| s.couplings).collect();
    (g.value(routed.output).to_vec(), couplings)
}

fn random_predictions(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = seeded(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn lengths_loss(lengths: &[f64], target: usize) -> f64 {
    let mut g = Graph::<f64>::new();
    let v = g.constant_from(&[1, lengths.len()], lengths.to_vec()).unwrap();
    let loss = margin_loss(&mut g, v, &[target], &MarginLossConfig::default()).unwrap();
    g.scalar(loss)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn squash_keeps_direction(s in prop::collection::vec(-100.0f64..100.0, 1..16)) {
        let out = squash_vector(&s);
        let dot: f64 = out.iter().zip(&s).map(|(a, b)| a * b).sum();
        prop_assert!(dot >= 0.0);
        // out is a scalar multiple of s: every 2x2 minor vanishes.
        let scale = norm(&out) * norm(&s);
        for i in 0..s.len() {
            for j in 0..s.len() {
                prop_assert!((out[i] * s[j] - out[j] * s[i]).abs() <= 1e-12 * scale.max(1e-300));
            }
        }
    }

    #[test]
    fn squash_norm_is_below_one(s in prop::collection::vec(-100.0f64..100.0, 1..16)) {
        prop_assert!(norm(&squash_vector(&s)) < 1.0);
    }

    #[test]
    fn squash_norm_increases_with_input_norm(
        dir in prop::collection::vec(-1.0f64..1.0, 2..12),
        r1 in 0.0f64..100.0,
        gap in 1e-3f64..50.0,
    ) {
        let n = norm(&dir);
        prop_assume!(n > 1e-3);
        let at = |r: f64| -> f64 {
            let s: Vec<f64> = dir.iter().map(|x| x / n * r).collect();
            norm(&squash_vector(&s))
        };
        prop_assert!(at(r1) < at(r1 + gap));
    }

    #[test]
    fn margin_loss_vanishes_only_inside_both_margins(
        lengths in prop::collection::vec(0.0f64..0.999, 7),
        target in 0usize..7,
    ) {
        let loss = lengths_loss(&lengths, target);
        prop_assert!(loss >= 0.0);
        let inside = lengths
            .iter()
            .enumerate()
            .all(|(k, &l)| if k == target { l >= 0.9 } else { l <= 0.1 });
        prop_assert_eq!(loss == 0.0, inside);
    }
}

#[test]
fn squash_matches_graph_op() {
    let s = random_predictions(3, 5 * 4);
    let mut g = Graph::<f64>::new();
    let v = g.constant_from(&[5, 4], s.clone()).unwrap();
    let out = squash(&mut g, v, 1).unwrap();
    for (row, got) in s.chunks(4).zip(g.value(out).chunks(4)) {
        assert_eq!(squash_vector(row), got);
    }
}

#[test]
fn routing_matches_reference_loop() {
    let (l, u, d) = (4, 2, 3);
    for seed in 0..20 {
        let u_hat = random_predictions(seed, l * u * d);
        for iters in 1..=4 {
            let (got, got_c) = engine_routing(&u_hat, l, u, d, iters);
            let (want, want_c) = reference_routing(&u_hat, l, u, d, iters);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "seed {seed} iters {iters}: {a} vs {b}");
            }
            for (a, b) in got_c.iter().flatten().zip(want_c.iter().flatten()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn couplings_sum_to_one_every_iteration() {
    for (l, u, d) in [(4, 2, 3), (8, 7, 8), (32, 7, 4)] {
        let u_hat: Vec<f64> = random_predictions(11, l * u * d).iter().map(|x| 3.0 * x).collect();
        let (_, history) = engine_routing(&u_hat, l, u, d, 5);
        assert_eq!(history.len(), 5);
        for c in &history {
            for row in c.chunks(u) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn single_iteration_squashes_the_uniformly_coupled_sum() {
    // Couplings start uniform over the upper axis, so each upper capsule
    // squashes sum_i u_hat[i, j] / U. With U a power of two that scaling
    // is exact, and when L == U it is the mean over lower capsules.
    for (l, u, d) in [(4, 4, 3), (2, 2, 5), (8, 8, 2)] {
        for seed in 0..10 {
            let u_hat = random_predictions(100 + seed, l * u * d);
            let (got, _) = engine_routing(&u_hat, l, u, d, 1);
            for j in 0..u {
                let mean: Vec<f64> = (0..d)
                    .map(|k| (0..l).map(|i| u_hat[(i * u + j) * d + k]).sum::<f64>() / l as f64)
                    .collect();
                assert_eq!(&got[j * d..(j + 1) * d], squash_vector(&mean).as_slice());
            }
        }
    }
    // Otherwise the mean is over upper capsules, not lower ones.
    let (l, u, d) = (6, 3, 2);
    let u_hat = random_predictions(7, l * u * d);
    let (got, _) = engine_routing(&u_hat, l, u, d, 1);
    for j in 0..u {
        let s: Vec<f64> = (0..d)
            .map(|k| (0..l).map(|i| u_hat[(i * u + j) * d + k] / u as f64).sum::<f64>())
            .collect();
        for (a, b) in got[j * d..(j + 1) * d].iter().zip(squash_vector(&s)) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}

#[test]
fn margin_loss_hand_values() {
    let mut boundary = [0.1; 7];
    boundary[2] = 0.9;
    assert!(lengths_loss(&boundary, 2).abs() < 1e-9);
    assert!((lengths_loss(&[0.5; 7], 0) - 0.64).abs() < 1e-9);
    assert!((lengths_loss(&[0.0; 7], 4) - 0.81).abs() < 1e-9);
}

mod common;

use std::collections::BTreeMap;

use common::{flops_oracle, layer_rates_oracle, matrix_with_spectrum, rng, threshold_oracle, Cubic, Quadratic};
use fedduap::datagen::{generate_synthetic, Dataset, SyntheticSpec};
use fedduap::nnkernel::{
    flatten_params, hessian_of, predict, unflatten_params, Layer, Matrix, Model, ModelBuilder, Tensor,
};
use fedduap::pruner::{
    aggregate_rate, calibration_batch, decentralized_ranks, expected_rate, feature_map_ranks, fedap,
    fixed_rate_prune, flops_count, gap_index, global_threshold, layer_rates, lipschitz_estimate, prune_list,
    prune_model, prune_with_ranks, rate_weights, FedApConfig, LayerRate, PlanInputs, RateConfig, SnapshotPair,
};
use proptest::prelude::*;
use rand::Rng;

fn data(seed: u64) -> Dataset {
    generate_synthetic(
        &SyntheticSpec {
            classes: 3,
            shape: [1, 8, 8],
            per_class: 12,
            noise_sigma: 0.7,
        },
        seed,
    )
    .unwrap()
}

fn two_conv(seed: u64) -> Model {
    ModelBuilder::new([1, 8, 8])
        .conv(4, 3, 1, 1)
        .relu()
        .conv(3, 2, 2, 0)
        .relu()
        .flatten()
        .dense(3)
        .build_random(&mut rng(seed))
        .unwrap()
}

/// Zeroes the weights and bias of `filter` in conv layer `layer`.
fn zero_filter(model: &Model, layer: usize, filter: usize) -> Model {
    let mut flat = flatten_params(model).0;
    let off: usize = model.layers()[..layer].iter().map(Layer::param_count).sum();
    let Layer::Conv2d(c) = &model.layers()[layer] else { panic!("not conv") };
    let fl = c.filter_len();
    flat[off + filter * fl..off + (filter + 1) * fl].fill(0.0);
    flat[off + c.out_channels * fl + filter] = 0.0;
    unflatten_params(model, &flat).unwrap()
}

fn random_batch(model: &Model, n: usize, seed: u64) -> (Tensor, Vec<Vec<f64>>) {
    let mut r = rng(seed);
    let len = model.input_len();
    let xs: Vec<Vec<f64>> = (0..n).map(|_| (0..len).map(|_| r.random_range(-2.0..2.0)).collect()).collect();
    let [c, h, w] = model.input_shape();
    (Tensor::new(vec![n, c, h, w], xs.concat()).unwrap(), xs)
}

#[test]
fn zero_rate_prune_is_identity() {
    let model = two_conv(1);
    let (batch, xs) = random_batch(&model, 5, 2);
    let inputs = PlanInputs {
        p_star: 0.0,
        threshold: 0.0,
        layer_rates: layer_rates(&model, 0.0),
    };
    let (pruned, plan) = prune_model(&model, &inputs, &batch).unwrap();
    assert_eq!(pruned, model);
    for x in &xs {
        assert_eq!(predict(&pruned, x), predict(&model, x));
    }
    assert!(plan.layers.iter().all(|l| l.preserved.len() == l.filters_before));
}

#[test]
fn removing_zero_filters_preserves_outputs() {
    let model = zero_filter(&zero_filter(&two_conv(3), 0, 1), 2, 0);
    let (calib, _) = random_batch(&model, 8, 4);
    let r0 = feature_map_ranks(&model, &calib, 0).unwrap();
    let r2 = feature_map_ranks(&model, &calib, 2).unwrap();
    assert_eq!(r0[1], 0.0);
    assert_eq!(r2[0], 0.0);
    assert!(r0.iter().enumerate().all(|(i, &r)| i == 1 || r > 0.0));
    let inputs = PlanInputs {
        p_star: 0.25,
        threshold: 0.0,
        layer_rates: vec![LayerRate { layer: 0, rate: 0.25 }, LayerRate { layer: 2, rate: 0.34 }],
    };
    let (pruned, plan) = prune_model(&model, &inputs, &calib).unwrap();
    assert_eq!(plan.layers[0].preserved, vec![0, 2, 3]);
    assert_eq!(plan.layers[1].preserved, vec![1, 2]);
    let (_, xs) = random_batch(&model, 100, 5);
    for x in &xs {
        let a = predict(&model, x);
        let b = predict(&pruned, x);
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}

#[test]
fn surgery_counts_match_formulas() {
    let model = two_conv(6);
    let mut ranks = BTreeMap::new();
    ranks.insert(0, vec![3.0, 0.0, 2.0, 1.0]);
    ranks.insert(2, vec![1.0, 2.0, 0.5]);
    let inputs = PlanInputs {
        p_star: 0.5,
        threshold: 0.1,
        layer_rates: vec![LayerRate { layer: 0, rate: 0.5 }, LayerRate { layer: 2, rate: 0.4 }],
    };
    let (pruned, plan) = prune_with_ranks(&model, &inputs, &ranks).unwrap();
    assert_eq!(plan.layers[0].preserved, vec![0, 2]);
    assert_eq!(plan.layers[1].preserved, vec![0, 1]);
    // conv 1->2 (k3), conv 2->2 (k2, 8x8 -> 4x4), dense 2*4*4 -> 3.
    let params = (2 * 9 + 2) + (2 * 2 * 4 + 2) + (32 * 3 + 3);
    assert_eq!(pruned.param_count(), params);
    let flops = 2.0 * 9.0 * 2.0 * 64.0 + 2.0 * 4.0 * 2.0 * 2.0 * 16.0 + 2.0 * 32.0 * 3.0;
    assert_eq!(flops_oracle(&pruned), flops);
    assert_eq!(flops_count(&pruned), flops / 1e6);
    assert_eq!(flops_count(&model), flops_oracle(&model) / 1e6);
}

#[test]
fn halving_a_lone_conv_halves_its_flops() {
    let model = ModelBuilder::new([2, 5, 5]).conv(6, 3, 1, 0).relu().flatten().dense(4).build_random(&mut rng(0)).unwrap();
    let mut ranks = BTreeMap::new();
    ranks.insert(0, vec![1.0; 6]);
    let inputs = PlanInputs {
        p_star: 0.5,
        threshold: 0.0,
        layer_rates: vec![LayerRate { layer: 0, rate: 0.5 }],
    };
    let (pruned, _) = prune_with_ranks(&model, &inputs, &ranks).unwrap();
    let conv = |m: &Model| 2.0 * 9.0 * 2.0 * 9.0 * match &m.layers()[0] {
        Layer::Conv2d(c) => c.out_channels as f64,
        _ => unreachable!(),
    };
    assert_eq!(conv(&pruned) * 2.0, conv(&model));
    assert_eq!(flops_count(&pruned) * 2.0, flops_count(&model));
}

#[test]
fn pruning_keeps_at_least_one_filter() {
    let model = two_conv(7);
    let threshold = flatten_params(&model).0.iter().fold(0.0f64, |a, v| a.max(v.abs())) + 1.0;
    let rates = layer_rates(&model, threshold);
    assert!(rates.iter().all(|r| r.rate == 1.0));
    let (calib, _) = random_batch(&model, 4, 1);
    let (pruned, plan) = prune_model(
        &model,
        &PlanInputs {
            p_star: 1.0,
            threshold,
            layer_rates: rates,
        },
        &calib,
    )
    .unwrap();
    assert!(plan.layers.iter().all(|l| l.preserved.len() == 1));
    assert!(pruned.param_count() < model.param_count());
}

#[test]
fn ranks_of_fully_downsampled_maps() {
    let model = ModelBuilder::new([1, 4, 4]).conv(3, 4, 4, 0).relu().flatten().dense(2).build_random(&mut rng(2)).unwrap();
    // A positive bias and non-negative inputs keep every 1x1 map positive.
    let mut flat = flatten_params(&model).0;
    flat[..48].iter_mut().for_each(|v| *v = v.abs());
    flat[48..51].fill(0.5);
    let model = unflatten_params(&model, &flat).unwrap();
    let batch = Tensor::new(vec![3, 1, 4, 4], (0..48).map(|i| f64::from(i % 5)).collect()).unwrap();
    assert_eq!(feature_map_ranks(&model, &batch, 0).unwrap(), vec![1.0; 3]);
    assert!(feature_map_ranks(&model, &batch, 2).is_err());
}

#[test]
fn ranks_match_per_sample_replay() {
    let model = two_conv(0);
    let d = data(0);
    let batch = calibration_batch(&d, 8, 0).unwrap();
    let ranks = feature_map_ranks(&model, &batch, 0).unwrap();
    // Replay: conv output of each sample by hand, ReLU, then echelon rank.
    let Layer::Conv2d(c) = &model.layers()[0] else { panic!() };
    let mut expected = vec![0.0; 4];
    for s in 0..8 {
        let x = batch.outer(s);
        for (f, e) in expected.iter_mut().enumerate() {
            let mut map = vec![vec![0.0; 8]; 8];
            for i in 0..8 {
                for j in 0..8 {
                    let mut acc = c.bias.data()[f];
                    for di in 0..3 {
                        for dj in 0..3 {
                            let (r, q) = (i as isize + di as isize - 1, j as isize + dj as isize - 1);
                            if (0..8).contains(&r) && (0..8).contains(&q) {
                                acc += c.weight.data()[f * 9 + di * 3 + dj] * x[r as usize * 8 + q as usize];
                            }
                        }
                    }
                    map[i][j] = acc.max(0.0);
                }
            }
            *e += common::echelon_rank(map, 1e-9) as f64;
        }
    }
    for e in &mut expected {
        *e /= 8.0;
    }
    assert_eq!(ranks, expected);
}

#[test]
fn decentralized_ranks_follow_the_data() {
    let model = zero_filter(&two_conv(4), 0, 3);
    let d = data(1);
    let a = decentralized_ranks(&d, &model, 0, 8, 5).unwrap();
    let b = decentralized_ranks(&d.clone(), &model, 0, 8, 5).unwrap();
    assert_eq!(a, b);
    assert_eq!(a[3], 0.0);
    let other = decentralized_ranks(&data(2), &model, 0, 8, 5).unwrap();
    assert_eq!(other[3], 0.0);
}

#[test]
fn threshold_and_layer_rates_match_brute_force() {
    let mut r = rng(21);
    for case in 0..200 {
        let model = two_conv(case);
        let mut flat = flatten_params(&model).0;
        // Quantize some entries so ties and exact-threshold hits occur.
        for v in flat.iter_mut().step_by(3) {
            *v = (*v * 4.0).round() / 4.0;
        }
        let model = unflatten_params(&model, &flat).unwrap();
        let p: f64 = match case % 4 {
            0 => 0.0,
            1 => 1.0,
            _ => r.random_range(0.0..1.0),
        };
        let v = global_threshold(&flat, p).unwrap();
        assert_eq!(v, threshold_oracle(&flat, p), "case {case}");
        let got: Vec<(usize, f64)> = layer_rates(&model, v).iter().map(|l| (l.layer, l.rate)).collect();
        assert_eq!(got, layer_rates_oracle(&model, v));
        if p == 0.0 {
            assert_eq!(v, 0.0);
            assert!(got.iter().all(|&(_, r)| r == 0.0));
        }
    }
}

#[test]
fn quadratic_spectrum_gives_its_gap_index() {
    for (spectrum, expected) in [
        (vec![0.0, 0.0, 5.0, 6.0], 0.5),
        (vec![1.0, 1.0, 1.0, 9.0, 9.5, 10.0], 0.5),
        // L is ~0 here, so the first positive gap already qualifies.
        (vec![2.0, 2.1, 2.2, 2.3], 0.25),
        // Repeated eigenvalues differ only by differencing noise.
        (vec![2.0, 2.0, 2.0, 2.0], 0.0),
        (vec![3.0], 0.0),
    ] {
        let a = matrix_with_spectrum(&spectrum, 3);
        let q = Quadratic { a };
        let w = vec![0.3; spectrum.len()];
        let est = expected_rate(&q, &w, 1.0, 0, &RateConfig::default()).unwrap();
        assert!(est.lipschitz < 1e-6, "{}", est.lipschitz);
        assert_eq!(est.rate, expected, "{spectrum:?}");
        assert_eq!(est.dim, spectrum.len());
    }
}

#[test]
fn p_max_clamps_the_rate() {
    let q = Quadratic { a: matrix_with_spectrum(&[0.0, 0.0, 0.0, 7.0], 1) };
    let cfg = RateConfig { p_max: 0.5, ..RateConfig::default() };
    assert_eq!(expected_rate(&q, &[0.1; 4], 1.0, 0, &cfg).unwrap().rate, 0.5);
    assert_eq!(expected_rate(&q, &[0.1; 4], 1.0, 0, &RateConfig::default()).unwrap().rate, 0.75);
}

#[test]
fn cubic_lipschitz_is_within_twice_the_bound() {
    for (c, w, radius) in [(1.0, 0.5, 0.1), (2.5, -1.0, 0.4), (0.3, 2.0, 1.0)] {
        let obj = Cubic { c };
        let h = hessian_of(&obj, &[w], 10).unwrap();
        assert!((h.get(0, 0) - 6.0 * c * w).abs() < 1e-6);
        let bound = 6.0 * c * radius;
        let est = lipschitz_estimate(&obj, &[w], &h, radius, 16, 1.0, 9).unwrap();
        assert!(est <= bound * (1.0 + 1e-6) && est >= bound / 2.0, "{est} vs {bound}");
        let doubled = lipschitz_estimate(&obj, &[w], &h, radius, 16, 2.0, 9).unwrap();
        assert_eq!(doubled, 2.0 * est);
    }
}

#[test]
fn lipschitz_edge_cases() {
    let q = Quadratic { a: vec![vec![2.0]] };
    let h = Matrix::from_rows(&[vec![2.0]]).unwrap();
    assert_eq!(lipschitz_estimate(&q, &[1.0], &h, 0.0, 4, 2.0, 0).unwrap(), 0.0);
    assert!(lipschitz_estimate(&q, &[1.0], &h, 1.0, 1, 2.0, 0).is_err());
    assert!(lipschitz_estimate(&q, &[1.0], &h, 1.0, 4, 2.0, 0).unwrap() < 1e-9);
}

#[test]
fn merge_weight_examples() {
    let p = aggregate_rate(&[0.5, 0.1], &[100, 100], &[0.0, 0.3], 0.01).unwrap();
    assert!((p - 0.4875).abs() < 1e-5);
    let w = rate_weights(&[100, 100], &[0.0, 0.3], 0.01).unwrap();
    assert!((w[0] / w[1] - 10000.0 / 322.580_645_161_290_3).abs() < 1e-9);
    assert_eq!(aggregate_rate(&[0.4], &[9], &[0.7], 0.01).unwrap(), 0.4);
    assert!(rate_weights(&[1], &[0.1], 0.0).is_err());
    assert!(rate_weights(&[0, 0], &[0.1, 0.2], 0.01).is_err());
}

#[test]
fn fedap_produces_a_consistent_plan() {
    let d = data(5);
    let devices: Vec<Dataset> = (0..3).map(|k| d.subset(&(k * 12..k * 12 + 12).collect::<Vec<_>>())).collect();
    let initial = ModelBuilder::new([1, 8, 8])
        .conv(3, 4, 4, 0)
        .relu()
        .conv(4, 2, 2, 0)
        .relu()
        .flatten()
        .dense(3)
        .build_random(&mut rng(5))
        .unwrap();
    let mut w = flatten_params(&initial).0;
    let mut r = rng(6);
    w.iter_mut().for_each(|v| *v += r.random_range(-0.05..0.05));
    let current = unflatten_params(&initial, &w).unwrap();
    let snap = SnapshotPair::new(initial.clone(), current.clone()).unwrap();
    let server = d.subset(&[0, 13, 26, 30]);
    let out = fedap(&snap, &server, &devices, &FedApConfig::default()).unwrap();
    assert_eq!(out.estimates.len(), 4);
    assert_eq!(out.estimates[0].client, 0);
    assert_eq!(out.divergences.len(), 4);
    assert!((0.0..=0.9).contains(&out.plan.p_star));
    assert_eq!(out.plan.threshold, global_threshold(&w, out.plan.p_star).unwrap());
    for lp in &out.plan.layers {
        let removed = (lp.rate * lp.filters_before as f64).floor() as usize;
        assert_eq!(lp.preserved.len(), (lp.filters_before - removed).max(1));
    }
    assert!(out.model.param_count() <= current.param_count());
    let again = fedap(&snap, &server, &devices, &FedApConfig::default()).unwrap();
    assert_eq!(again.model, out.model);
    assert!(fedap(&snap, &server, &[], &FedApConfig::default()).is_err());
    // Without server data the calibration falls back to device 0.
    let no_server = fedap(&snap, &Dataset::empty([1, 8, 8], 3), &devices, &FedApConfig::default()).unwrap();
    assert_eq!(no_server.estimates.len(), 3);
    assert!(SnapshotPair::new(initial, two_conv(0)).is_err());
}

#[test]
fn fixed_rate_baseline_prunes_every_layer() {
    let model = two_conv(8);
    let (pruned, plan) = fixed_rate_prune(&model, 0.5, &data(3), &FedApConfig::default()).unwrap();
    assert_eq!(plan.layers.iter().map(|l| l.preserved.len()).collect::<Vec<_>>(), vec![2, 2]);
    assert_eq!(flops_count(&pruned), flops_oracle(&pruned) / 1e6);
    assert_eq!(prune_list(&model), vec![0, 2]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn layer_rates_grow_with_threshold(seed in 0u64..500, a in 0.0f64..1.5, b in 0.0f64..1.5) {
        let model = two_conv(seed);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let rl = layer_rates(&model, lo);
        let rh = layer_rates(&model, hi);
        for (x, y) in rl.iter().zip(&rh) {
            prop_assert!(x.rate <= y.rate);
            prop_assert!((0.0..=1.0).contains(&x.rate));
        }
    }

    #[test]
    fn threshold_never_overshoots_the_rate(values in proptest::collection::vec(-3.0f64..3.0, 1..300), p in 0.0f64..=1.0) {
        let v = global_threshold(&values, p).unwrap();
        let idx = (values.len() as f64 * p).floor() as usize;
        let below = values.iter().filter(|x| x.abs() < v).count();
        let at_most = values.iter().filter(|x| x.abs() <= v).count();
        prop_assert!(below <= idx.saturating_sub(1) || idx == 0);
        prop_assert!(idx == 0 || at_most >= idx);
    }

    #[test]
    fn gap_index_is_monotone_in_lipschitz(mut spec in proptest::collection::vec(-5.0f64..5.0, 1..20), l1 in 0.0f64..2.0, l2 in 0.0f64..2.0) {
        spec.sort_by(f64::total_cmp);
        let (lo, hi) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
        let g_lo = gap_index(&spec, lo);
        let g_hi = gap_index(&spec, hi);
        // A larger L can only skip earlier gaps or reject all of them.
        prop_assert!(g_hi == 0 || g_hi >= g_lo);
        prop_assert!(g_lo < spec.len().max(1));
    }
}

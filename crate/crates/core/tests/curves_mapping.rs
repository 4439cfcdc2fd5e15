mod common;

use common::*;
use enc_core::curve::{default_schedule, measured_curve, pca_curve};
use enc_core::network::matricize_and_svd;
use enc_core::search::limit_space;
use enc_core::{
    build_mapping, enc_map_select, AccuracyTarget, AnalyticOracle, ComplexityMode, ComplexityModel, CurveSet, Decomposition,
    LayerSpec, MetricKind, NetworkSpec,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

#[test]
fn svd_matches_jacobi() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let layers = [
        LayerSpec::fully_connected("fc", 4, 4),
        LayerSpec::convolutional("s", 6, 6, 3, 3, 4, Decomposition::Spatial),
        LayerSpec::convolutional("c", 6, 6, 3, 5, 7, Decomposition::Channel),
        LayerSpec::convolutional("wide", 6, 6, 3, 2, 9, Decomposition::Spatial),
    ];
    for layer in layers {
        let n = layer.weight_len();
        let layer = layer.with_weights(random_weights(&mut rng, n));
        let (rows, cols, m) = matricize(&layer);
        let expected = jacobi_singular_values(rows, cols, &m);
        let got = matricize_and_svd(&layer).unwrap();
        assert_eq!(got.len(), layer.max_rank());
        for (g, e) in got.iter().zip(&expected) {
            assert!((g - e).abs() <= 1e-8 * e.max(1e-12), "{} vs {}", g, e);
        }
    }
}

#[test]
fn loaded_fixture_singular_values_match_jacobi() {
    let net = fixture(1);
    for layer in net.layers() {
        let (rows, cols, m) = matricize(layer);
        let expected = jacobi_singular_values(rows, cols, &m);
        let got = layer.singular_values.as_ref().unwrap();
        for (g, e) in got.iter().zip(&expected) {
            assert!((g - e).abs() <= 1e-8 * expected[0]);
        }
    }
}

#[test]
fn pca_curve_is_the_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for m in [2, 3, 9, 48, 200] {
        let sigma = random_sigma(&mut rng, m);
        let layer = LayerSpec::fully_connected("fc", m, m + 3).with_singular_values(sigma.clone());
        let curve = pca_curve(&layer).unwrap();
        let direct = direct_pca(&sigma);
        for r in 1..=m {
            assert_eq!(curve.value(r as f64), direct[r], "rank {r} of {m}");
        }
    }
    let layer = LayerSpec::fully_connected("fc", 4, 4).with_singular_values(vec![4.0, 3.0, 2.0, 1.0]);
    assert_eq!(pca_curve(&layer).unwrap().value(2.0), 0.5);
}

#[test]
fn measured_curve_of_the_oracle_is_the_pca_curve() {
    let sigma = vec![4.0, 3.0, 2.0, 1.0];
    let net = NetworkSpec::new(vec![
        LayerSpec::fully_connected("a", 4, 4).with_singular_values(sigma.clone()),
        LayerSpec::fully_connected("b", 4, 6).with_singular_values(vec![5.0, 2.0, 1.5, 0.1]),
    ])
    .unwrap();
    let oracle = AnalyticOracle::unit(&net).unwrap();
    for l in 1..=2 {
        let measured = measured_curve(l, &net, &oracle, &[1, 2, 3, 4]).unwrap();
        let direct = direct_pca(net.layer(l).singular_values.as_ref().unwrap());
        for r in 1..=4 {
            assert!((measured.value(r as f64) - direct[r]).abs() < 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn inverse_round_trip_and_monotone(seed in 0u64..1_000_000, m in 2usize..120) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = LayerSpec::fully_connected("fc", m, m).with_singular_values(random_sigma(&mut rng, m));
        let curve = pca_curve(&layer).unwrap();
        for k in 0..=200 {
            let a = k as f64 / 200.0;
            let r = curve.invert(a);
            prop_assert!((curve.value(r) - a).abs() <= 1e-6);
        }
        let mut prev = f64::NEG_INFINITY;
        for k in 0..1000 {
            let r = 1.0 + (m - 1) as f64 * k as f64 / 999.0;
            let v = curve.value(r);
            prop_assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn mapping_rows_are_equal_metric(seed in 0u64..1_000_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = synthetic_conv(&mut rng, 5, 4);
        let metric = metric_for(&net, MetricKind::Pca, CurveSet::pca(&net).unwrap());
        let table = build_mapping(&metric, &[None; 5], 64).unwrap();
        let curves: Vec<_> = net.layers().iter().map(|l| pca_curve(l).unwrap()).collect();
        for row in table.rows() {
            for (c, &r) in curves.iter().zip(&row.ranks) {
                prop_assert!((c.value(r) - row.a).abs() <= 1e-6);
            }
            let model = metric.complexity();
            prop_assert!((row.complexity - model.total_real(&row.ranks)).abs() <= 1e-6 * model.original() as f64);
        }
        for w in table.rows().windows(2) {
            prop_assert!(w[1].complexity >= w[0].complexity);
            prop_assert!(w[1].metric >= w[0].metric);
        }
    }

    #[test]
    fn enc_map_stays_under_budget(seed in 0u64..1_000_000, fraction in 0.05f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = synthetic_conv(&mut rng, 6, 16);
        let model = ComplexityModel::new(&net, ComplexityMode::Flops);
        let metric = metric_for(&net, MetricKind::Pca, CurveSet::pca(&net).unwrap());
        let table = build_mapping(&metric, &[None; 6], 256).unwrap();
        let target = (fraction * model.original() as f64).max(model.floor() as f64);
        let ranks = enc_map_select(&table, target).unwrap();
        let c = model.total(&ranks).unwrap() as f64;
        prop_assert!(c <= target);
        prop_assert!(c >= 0.98 * target);
    }
}

#[test]
fn metric_round_trip_through_the_mapping() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let net = synthetic_conv(&mut rng, 4, 8);
    let metric = metric_for(&net, MetricKind::Pca, CurveSet::pca(&net).unwrap());
    let table = build_mapping(&metric, &[None; 4], 256).unwrap();
    let model = ComplexityModel::new(&net, ComplexityMode::Flops);
    for f in [0.2, 0.4, 0.6, 0.8] {
        let c = f * model.original() as f64;
        let a = table.map_c_to_a(c).unwrap();
        let back = table.map_a_to_c(AccuracyTarget::Network(a)).unwrap();
        assert!((back - c).abs() <= 1e-6 * model.original() as f64, "{back} vs {c}");
        let real = table.map_c_to_r(c).unwrap();
        assert!((metric.evaluate_real(&real) - a).abs() <= 1e-9);
    }
}

#[test]
fn vgg_space_bounds_bracket_the_margin() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let net = vgg16(&mut rng);
    let model = ComplexityModel::new(&net, ComplexityMode::Flops);
    let metric = metric_for(&net, MetricKind::Pca, CurveSet::pca(&net).unwrap());
    let table = build_mapping(&metric, &[None; 13], 256).unwrap();
    let original = model.original() as f64;
    let space = limit_space(&table, 0.25 * original, 0.10 * original).unwrap();
    let rounding = model.coefficients().iter().sum::<u64>() as f64 / original;
    let upper = model.total(&space.r_max).unwrap() as f64 / original;
    let lower = model.total(&space.r_min).unwrap() as f64 / original;
    assert!((0.35..=0.35 + rounding).contains(&upper), "{upper}");
    assert!((0.15 - rounding..=0.15).contains(&lower), "{lower}");
    let selected = enc_map_select(&table, 0.25 * original).unwrap();
    assert!(space.r_min.le(&selected) && selected.le(&space.r_max));
}

#[test]
fn default_schedule_spans_the_range() {
    for m in [2, 5, 16, 100, 512] {
        let s = default_schedule(m);
        assert_eq!(s[0], 1);
        assert_eq!(*s.last().unwrap(), m);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
    }
}

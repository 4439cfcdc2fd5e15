mod common;

use std::collections::BTreeSet;

use common::*;
use enc_core::search::{min_offset, GroupingOptions, SearchSpace};
use enc_core::{
    enc_model_select, extract_candidates, Budget, ComplexityMode, CurveSet, MetricKind, NetworkSpec, SearchOptions,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn space(r_min: &[usize], r_max: &[usize], steps: &[usize]) -> SearchSpace {
    SearchSpace::new(ranks(r_min), ranks(r_max), steps.to_vec()).unwrap()
}

fn found(net: &NetworkSpec, kind: MetricKind, curves: CurveSet, s: &SearchSpace, budget: &Budget, options: &SearchOptions) -> BTreeSet<Vec<usize>> {
    let metric = metric_for(net, kind, curves);
    match extract_candidates(&metric, s, budget, options) {
        Ok(set) => set.iter().map(|c| c.ranks.0.clone()).collect(),
        Err(enc_core::EncError::EmptyCandidates(_)) => BTreeSet::new(),
        Err(e) => panic!("{e}"),
    }
}

/// Random budget centered on a random configuration inside the space.
fn random_budget(rng: &mut ChaCha8Rng, net: &NetworkSpec, s: &SearchSpace, margin_fraction: f64) -> Budget {
    let model = enc_core::ComplexityModel::new(net, ComplexityMode::Flops);
    let r: Vec<usize> = (0..s.r_max.len()).map(|l| rng.random_range(s.r_min[l]..=s.r_max[l])).collect();
    let target = model.total_of(&r).unwrap() as f64 + rng.random_range(-0.5..0.5);
    Budget {
        target,
        space_margin: model.original() as f64,
        candidate_margin: margin_fraction * target,
    }
}

#[test]
fn two_layers_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let net = synthetic_fc(&mut rng, &[(6, 8), (8, 5)]);
    let s = space(&[1, 1], &[6, 5], &[1, 1]);
    let model = enc_core::ComplexityModel::new(&net, ComplexityMode::Flops);
    for _ in 0..20 {
        let budget = random_budget(&mut rng, &net, &s, 0.08);
        let expected = brute_force_window(&s, &model, &budget);
        let got = found(&net, MetricKind::Pca, CurveSet::pca(&net).unwrap(), &s, &budget, &SearchOptions::exhaustive());
        assert_eq!(got, expected);
    }
}

#[test]
fn three_layers_every_metric() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..10 {
        let net = synthetic_fc(&mut rng, &[(8, 7), (5, 8), (8, 8)]);
        let (curves, tables) = random_measured(&mut rng, &net);
        let direct = DirectMetric::new(&net, Some(tables), ComplexityMode::Flops);
        let s = space(&[1, 1, 1], &[7, 5, 8], &[1, 1, 1]);
        let budget = random_budget(&mut rng, &net, &s, 0.05);
        let expected = brute_force_window(&s, &direct.model, &budget);
        for kind in [MetricKind::Pca, MetricKind::Measured, MetricKind::Combined] {
            let metric = metric_for(&net, kind, curves.clone());
            let set = match extract_candidates(&metric, &s, &budget, &SearchOptions::exhaustive()) {
                Ok(set) => set,
                Err(_) => {
                    assert!(expected.is_empty());
                    continue;
                }
            };
            let got: BTreeSet<Vec<usize>> = set.iter().map(|c| c.ranks.0.clone()).collect();
            assert_eq!(got, expected);
            let best = enc_model_select(&set).unwrap();
            assert_eq!(best.ranks.0, argmax(&expected, |r| direct.value(kind, r)), "{kind}");
        }
    }
}

#[test]
fn stepped_grouped_twelve_layers_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let shapes = [(12, 10), (8, 9), (8, 8), (9, 7), (10, 6), (6, 6), (6, 6), (6, 6), (6, 6), (6, 6), (6, 6), (9, 11)];
    let net = synthetic_fc(&mut rng, &shapes);
    let s = space(&[2, 3, 2, 3, 2, 2, 2, 2, 2, 2, 2, 5], &[6, 7, 6, 7, 6, 6, 6, 6, 6, 6, 6, 9], &[2; 12]);
    let model = enc_core::ComplexityModel::new(&net, ComplexityMode::Flops);
    let options = SearchOptions {
        grouping: GroupingOptions::default(),
        ..SearchOptions::exhaustive()
    };
    for _ in 0..3 {
        let budget = random_budget(&mut rng, &net, &s, 0.01);
        let expected = brute_force_window(&s, &model, &budget);
        let metric = metric_for(&net, MetricKind::Pca, CurveSet::pca(&net).unwrap());
        let set = extract_candidates(&metric, &s, &budget, &options).unwrap();
        assert!(set.summary.top_dimension <= 6);
        assert!(set.summary.levels > 1);
        let got: BTreeSet<Vec<usize>> = set.iter().map(|c| c.ranks.0.clone()).collect();
        assert_eq!(got, expected);
    }
}

#[test]
fn beam_keeps_a_subset_of_the_window() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let shapes = [(8, 8); 9];
    let net = synthetic_fc(&mut rng, &shapes);
    let s = space(&[1; 9], &[5; 9], &[1; 9]);
    let model = enc_core::ComplexityModel::new(&net, ComplexityMode::Flops);
    let budget = random_budget(&mut rng, &net, &s, 0.01);
    let all = found(&net, MetricKind::Pca, CurveSet::pca(&net).unwrap(), &s, &budget, &SearchOptions::exhaustive());
    let options = SearchOptions {
        beam: Some(4),
        max_candidates: None,
        ..SearchOptions::default()
    };
    let beamed = found(&net, MetricKind::Pca, CurveSet::pca(&net).unwrap(), &s, &budget, &options);
    assert!(!beamed.is_empty());
    assert!(beamed.is_subset(&all));
    assert!(beamed.len() < all.len());
    for r in &beamed {
        assert!(budget.admits(model.total_of(r).unwrap()));
    }
}

#[test]
fn candidate_cap_keeps_the_best() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let net = synthetic_fc(&mut rng, &[(10, 9), (9, 12), (12, 8), (8, 10)]);
    let (curves, tables) = random_measured(&mut rng, &net);
    let direct = DirectMetric::new(&net, Some(tables), ComplexityMode::Flops);
    let s = space(&[1; 4], &[9, 9, 8, 8], &[1; 4]);
    let budget = random_budget(&mut rng, &net, &s, 0.03);
    for kind in [MetricKind::Pca, MetricKind::Measured, MetricKind::Combined] {
        let metric = metric_for(&net, kind, curves.clone());
        let full = extract_candidates(&metric, &s, &budget, &SearchOptions::exhaustive()).unwrap();
        let capped = extract_candidates(
            &metric,
            &s,
            &budget,
            &SearchOptions {
                max_candidates: Some(25),
                beam: None,
                ..SearchOptions::default()
            },
        )
        .unwrap();
        assert_eq!(capped.len(), 25.min(full.len()));
        assert_eq!(capped.candidates, full.candidates[..capped.len()].to_vec());
        let mut by_direct: Vec<&Vec<usize>> = full.iter().map(|c| &c.ranks.0).collect();
        by_direct.sort_by(|a, b| direct.value(kind, b).total_cmp(&direct.value(kind, a)).then(a.cmp(b)));
        assert_eq!(&capped.candidates[0].ranks.0, by_direct[0]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn every_candidate_lies_in_the_window(seed in 0u64..1_000_000, margin in 0.002f64..0.05) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = synthetic_fc(&mut rng, &[(9, 7), (6, 10), (8, 8), (7, 9), (10, 10)]);
        let s = space(&[1; 5], &[7, 6, 8, 7, 10], &[1; 5]);
        let model = enc_core::ComplexityModel::new(&net, ComplexityMode::Flops);
        let budget = random_budget(&mut rng, &net, &s, margin);
        let metric = metric_for(&net, MetricKind::Pca, CurveSet::pca(&net).unwrap());
        if let Ok(set) = extract_candidates(&metric, &s, &budget, &SearchOptions::default()) {
            for c in set.iter() {
                prop_assert_eq!(c.complexity, model.total(&c.ranks).unwrap());
                let x = c.complexity as f64;
                prop_assert!(budget.target - budget.candidate_margin < x && x < budget.target + budget.candidate_margin);
                prop_assert!(c.ranks.le(&s.r_max) && s.r_min.le(&c.ranks));
            }
        }
    }

    #[test]
    fn min_offset_identity(seed in 0u64..1_000_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = synthetic_conv(&mut rng, 6, 2);
        let model = enc_core::ComplexityModel::new(&net, ComplexityMode::Flops);
        let r_max: Vec<usize> = net.max_ranks();
        let s = space(&vec![1; 6], &r_max, &vec![1; 6]);
        let diff = min_offset(&s, &model, &Budget::with_defaults(model.original() as f64 / 2.0, model.original())).unwrap();
        let offsets: Vec<usize> = r_max.iter().map(|&m| rng.random_range(0..m)).collect();
        let r = diff.reconstruct(&offsets);
        prop_assert_eq!(model.total(&r).unwrap(), model.total_of(&r_max).unwrap() - diff.cost(&offsets));
    }
}

mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{enumerate_marginal, random_evidence, random_structure};
use sobn_core::harness::{decbod, gamma, CoverageRecord, GRID_POINTS};
use sobn_core::network::sample_ground_truth;
use sobn_core::spn::{Scratch, Spn};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn any_elimination_order_gives_the_enumerated_marginal(seed in any::<u64>(), n in 1usize..6, observe in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_structure(&mut rng, n, 2..=3);
        let net = sample_ground_truth(&s, &mut rng);
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let spn = Spn::compile(&s, &order).unwrap();
        let e = random_evidence(&mut rng, &s.cardinalities(), observe);
        let p = spn.forward(net.theta(), &e, &mut Scratch::default());
        let want = enumerate_marginal(&net, &e);
        prop_assert!((p - want).abs() <= 1e-12 * want.max(1e-300).max(1.0), "{p} vs {want}");
    }

    #[test]
    fn each_node_contributes_one_factor_per_term(seed in any::<u64>(), n in 1usize..6, observe in 0.0f64..1.0) {
        // the polynomial is multilinear with one parameter of every node in each term
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_structure(&mut rng, n, 2..=3);
        let net = sample_ground_truth(&s, &mut rng);
        let spn = Spn::compile_default(&s);
        let e = random_evidence(&mut rng, &s.cardinalities(), observe);
        let pass = spn.backward(net.theta(), &e, &mut Scratch::default());
        for node in 0..n {
            let euler: f64 = s
                .layout()
                .node_families(node)
                .iter()
                .flat_map(|f| f.range())
                .map(|j| net.theta()[j] * pass.gradient[j])
                .sum();
            prop_assert!((euler - pass.value).abs() <= 1e-12 * pass.value.max(1e-300), "node {node}: {euler} vs {}", pass.value);
        }
    }

    #[test]
    fn coverage_curve_is_monotone_and_bounded(thresholds in prop::collection::vec(0.0f64..=1.0, 1..200)) {
        let records: Vec<CoverageRecord> = thresholds
            .iter()
            .map(|&t| CoverageRecord { node: 0, value: 0, mean: 0.5, variance: 0.01, truth: 0.5, threshold: t })
            .collect();
        let curve = decbod(&records).unwrap();
        prop_assert_eq!(curve.r.len(), GRID_POINTS);
        prop_assert!(curve.r.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!((0.0..=0.5).contains(&curve.mean_abs));
        for i in 0..GRID_POINTS {
            let want = thresholds.iter().filter(|&&t| gamma(i) >= t).count() as f64 / thresholds.len() as f64;
            prop_assert!((curve.at(i) - want).abs() < 1e-15);
        }
    }
}

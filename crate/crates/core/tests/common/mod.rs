//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use gauss_quad::GaussLegendre;
use rand::Rng;
use sobn_core::network::{BayesNet, Observation, Structure};

/// Random DAG over `n` nodes: each forward pair of a random ordering is an edge with
/// probability one half.
pub fn random_structure<R: Rng>(rng: &mut R, n: usize, card: std::ops::RangeInclusive<usize>) -> Structure {
    let cards: Vec<usize> = (0..n).map(|_| rng.random_range(card.clone())).collect();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if rng.random::<f64>() < 0.5 {
                edges.push((order[a], order[b]));
            }
        }
    }
    Structure::from_edges(&cards, &edges).unwrap()
}

/// Every complete assignment, first node slowest.
pub fn assignments(cards: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for &k in cards {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                (0..k).map(move |v| {
                    let mut a = prefix.clone();
                    a.push(v);
                    a
                })
            })
            .collect();
    }
    out
}

/// `p(e)` by summing the factorized joint over all consistent assignments.
pub fn enumerate_marginal(net: &BayesNet, evidence: &Observation) -> f64 {
    assignments(&net.structure().cardinalities())
        .iter()
        .filter(|a| evidence.0.iter().zip(a.iter()).all(|(e, v)| e.is_none_or(|e| e == *v)))
        .map(|a| net.joint(a))
        .sum()
}

pub fn random_evidence<R: Rng>(rng: &mut R, cards: &[usize], observe: f64) -> Observation {
    Observation(
        cards
            .iter()
            .map(|&k| (rng.random::<f64>() < observe).then(|| rng.random_range(0..k)))
            .collect(),
    )
}

/// Gauss-Legendre nodes and weights mapped to [0, 1].
pub fn unit_rule(points: usize) -> Vec<(f64, f64)> {
    GaussLegendre::new(points)
        .unwrap()
        .iter()
        .map(|&(x, w)| (0.5 * (x + 1.0), 0.5 * w))
        .collect()
}

/// Tensor-product Gauss-Legendre integral over the unit cube `[0, 1]^dim` of a vector-valued
/// integrand.
pub fn cube_integral<F>(dim: usize, points: usize, outputs: usize, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64], &mut [f64]),
{
    let rule = unit_rule(points);
    let mut acc = vec![0.0; outputs];
    let mut buf = vec![0.0; outputs];
    let mut x = vec![0.0; dim];
    let mut idx = vec![0usize; dim];
    loop {
        let mut w = 1.0;
        for d in 0..dim {
            x[d] = rule[idx[d]].0;
            w *= rule[idx[d]].1;
        }
        f(&x, &mut buf);
        acc.iter_mut().zip(&buf).for_each(|(a, b)| *a += w * b);
        let mut d = 0;
        loop {
            if d == dim {
                return acc;
            }
            idx[d] += 1;
            if idx[d] < points {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
    }
}

//! Arithmetic circuits for the network polynomial.
//!
//! A Bayesian network is compiled by variable elimination into a DAG of sum and product
//! nodes over indicator leaves `λ_{x_i}` and parameter leaves `θ_j`. Nodes are stored in an
//! arena in creation order, which is always a valid bottom-up evaluation order. Structurally
//! identical nodes are shared.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::network::{Evidence, Structure};

pub type NodeId = usize;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum SpnNode {
    Sum(Vec<NodeId>),
    Product(Vec<NodeId>),
    Indicator { var: usize, value: usize },
    Param(usize),
}

#[derive(Clone, Debug)]
pub struct Spn {
    nodes: Vec<SpnNode>,
    root: NodeId,
    /// For each flat parameter index, the leaves that read it.
    param_leaves: Vec<Vec<NodeId>>,
    cardinalities: Vec<usize>,
}

/// Caller-owned buffers for one evaluation.
#[derive(Clone, Debug, Default)]
pub struct Scratch {
    values: Vec<f64>,
    adjoints: Vec<f64>,
    prefix: Vec<f64>,
}

/// Result of a forward and backward sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct PassResult {
    /// `p(e; θ)`
    pub value: f64,
    /// `∂p(e; θ)/∂θ_j` for every parameter.
    pub gradient: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SpnStats {
    pub sums: usize,
    pub products: usize,
    pub indicators: usize,
    pub params: usize,
}

/// A table of circuit nodes over the joint states of `scope`, row-major.
struct Factor {
    scope: Vec<usize>,
    entries: Vec<NodeId>,
}

struct Builder {
    nodes: Vec<SpnNode>,
    unique: HashMap<SpnNode, NodeId>,
}

impl Builder {
    fn intern(&mut self, node: SpnNode) -> NodeId {
        if let Some(&id) = self.unique.get(&node) {
            return id;
        }
        let id = self.nodes.len();
        self.nodes.push(node.clone());
        self.unique.insert(node, id);
        id
    }

    fn product(&mut self, mut children: Vec<NodeId>) -> NodeId {
        if children.len() == 1 {
            return children[0];
        }
        children.sort_unstable();
        self.intern(SpnNode::Product(children))
    }

    fn sum(&mut self, mut children: Vec<NodeId>) -> NodeId {
        if children.len() == 1 {
            return children[0];
        }
        children.sort_unstable();
        self.intern(SpnNode::Sum(children))
    }
}

/// Row-major index of `assignment` restricted to `scope`.
fn scope_index(scope: &[usize], cards: &[usize], assignment: &[usize]) -> usize {
    scope.iter().fold(0, |acc, &v| acc * cards[v] + assignment[v])
}

/// Visits every joint state of `scope`, writing values into `assignment`.
fn for_each_state(
    scope: &[usize],
    cards: &[usize],
    assignment: &mut [usize],
    mut f: impl FnMut(&[usize]),
) {
    scope.iter().for_each(|&v| assignment[v] = 0);
    loop {
        f(assignment);
        let mut k = scope.len();
        loop {
            if k == 0 {
                return;
            }
            k -= 1;
            let v = scope[k];
            assignment[v] += 1;
            if assignment[v] < cards[v] {
                break;
            }
            assignment[v] = 0;
        }
    }
}

impl Spn {
    /// Compiles with the default elimination order (reverse topological).
    pub fn compile_default(structure: &Structure) -> Self {
        let order: Vec<usize> = structure.topo_order().iter().rev().copied().collect();
        Self::compile(structure, &order).expect("reverse topological order is a permutation")
    }

    /// Variable elimination in the given order. The circuit's structure depends on the order,
    /// its value does not.
    pub fn compile(structure: &Structure, order: &[usize]) -> Result<Self> {
        let n = structure.len();
        let mut seen = vec![false; n];
        if order.len() != n || order.iter().any(|&v| v >= n || std::mem::replace(&mut seen[v], true))
        {
            return Err(Error::Argument(format!(
                "elimination order {order:?} is not a permutation of 0..{n}"
            )));
        }
        let cards = structure.cardinalities();
        let layout = structure.layout();
        let mut b = Builder { nodes: Vec::new(), unique: HashMap::new() };
        let mut assignment = vec![0usize; n];

        // one factor per CPT: λ_{x_i} · θ_{x_i|pa_i}
        let mut factors: Vec<Factor> = Vec::with_capacity(n);
        for i in 0..n {
            let mut scope: Vec<usize> = structure.parents(i).to_vec();
            scope.push(i);
            scope.sort_unstable();
            let mut entries = Vec::new();
            for_each_state(&scope, &cards, &mut assignment, |a| {
                let ind = b.intern(SpnNode::Indicator { var: i, value: a[i] });
                let pa = structure.parent_config(i, a);
                let par = b.intern(SpnNode::Param(layout.index(i, pa, a[i])));
                entries.push(b.product(vec![ind, par]));
            });
            factors.push(Factor { scope, entries });
        }

        for &var in order {
            let (bucket, rest): (Vec<Factor>, Vec<Factor>) =
                factors.into_iter().partition(|f| f.scope.contains(&var));
            factors = rest;
            let mut scope: Vec<usize> = bucket.iter().flat_map(|f| f.scope.iter().copied()).collect();
            scope.sort_unstable();
            scope.dedup();
            let kept: Vec<usize> = scope.iter().copied().filter(|&v| v != var).collect();
            let mut entries = Vec::new();
            for_each_state(&kept, &cards, &mut assignment, |a| {
                let mut a = a.to_vec();
                let terms = (0..cards[var])
                    .map(|x| {
                        a[var] = x;
                        let children = bucket
                            .iter()
                            .map(|f| f.entries[scope_index(&f.scope, &cards, &a)])
                            .collect();
                        b.product(children)
                    })
                    .collect();
                entries.push(b.sum(terms));
            });
            factors.push(Factor { scope: kept, entries });
        }

        let roots: Vec<NodeId> = factors.iter().map(|f| f.entries[0]).collect();
        let root = b.product(roots);
        let mut param_leaves = vec![Vec::new(); layout.len()];
        for (id, node) in b.nodes.iter().enumerate() {
            if let SpnNode::Param(j) = *node {
                param_leaves[j].push(id);
            }
        }
        Ok(Self { nodes: b.nodes, root, param_leaves, cardinalities: cards })
    }

    pub fn nodes(&self) -> &[SpnNode] {
        &self.nodes
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn num_params(&self) -> usize {
        self.param_leaves.len()
    }

    pub fn stats(&self) -> SpnStats {
        let mut s = SpnStats::default();
        for node in &self.nodes {
            match node {
                SpnNode::Sum(_) => s.sums += 1,
                SpnNode::Product(_) => s.products += 1,
                SpnNode::Indicator { .. } => s.indicators += 1,
                SpnNode::Param(_) => s.params += 1,
            }
        }
        s
    }

    /// Text dump, one node per line as `id TYPE args` in evaluation order, followed by a
    /// final `id ROOT` line.
    pub fn dump(&self, structure: &Structure) -> String {
        let mut out = String::new();
        for (id, node) in self.nodes.iter().enumerate() {
            let _ = match node {
                SpnNode::Sum(c) => writeln!(out, "{id} SUM {}", join(c)),
                SpnNode::Product(c) => writeln!(out, "{id} PROD {}", join(c)),
                SpnNode::Indicator { var, value } => {
                    writeln!(out, "{id} IND {} {value}", structure.vars()[*var].id)
                }
                SpnNode::Param(j) => writeln!(out, "{id} PARAM {j}"),
            };
        }
        let _ = writeln!(out, "{} ROOT", self.root);
        out
    }

    /// `p(e; θ)`.
    pub fn forward(&self, theta: &[f64], evidence: &Evidence, scratch: &mut Scratch) -> f64 {
        debug_assert_eq!(theta.len(), self.num_params());
        debug_assert_eq!(evidence.0.len(), self.cardinalities.len());
        let values = &mut scratch.values;
        values.clear();
        values.reserve(self.nodes.len());
        for node in &self.nodes {
            let v = match node {
                SpnNode::Sum(c) => c.iter().map(|&k| values[k]).sum(),
                SpnNode::Product(c) => c.iter().map(|&k| values[k]).product(),
                SpnNode::Indicator { var, value } => match evidence.0[*var] {
                    Some(x) if x != *value => 0.0,
                    _ => 1.0,
                },
                SpnNode::Param(j) => theta[*j],
            };
            values.push(v);
        }
        values[self.root]
    }

    /// Forward sweep followed by one reverse sweep giving every `∂p(e;θ)/∂θ_j`.
    pub fn backward(&self, theta: &[f64], evidence: &Evidence, scratch: &mut Scratch) -> PassResult {
        let value = self.forward(theta, evidence, scratch);
        let Scratch { values, adjoints, prefix } = scratch;
        adjoints.clear();
        adjoints.resize(self.nodes.len(), 0.0);
        adjoints[self.root] = 1.0;
        for id in (0..=self.root).rev() {
            let adj = adjoints[id];
            if adj == 0.0 {
                continue;
            }
            match &self.nodes[id] {
                SpnNode::Sum(c) => c.iter().for_each(|&k| adjoints[k] += adj),
                SpnNode::Product(c) => {
                    // product of the other children without dividing, so zeros are safe
                    prefix.clear();
                    let mut acc = 1.0;
                    for &k in c {
                        prefix.push(acc);
                        acc *= values[k];
                    }
                    let mut suffix = 1.0;
                    for (slot, &k) in c.iter().enumerate().rev() {
                        adjoints[k] += adj * prefix[slot] * suffix;
                        suffix *= values[k];
                    }
                }
                SpnNode::Indicator { .. } | SpnNode::Param(_) => {}
            }
        }
        let gradient = self
            .param_leaves
            .iter()
            .map(|leaves| leaves.iter().map(|&l| adjoints[l]).sum())
            .collect();
        PassResult { value, gradient }
    }

    /// Like [`Spn::backward`], but flags an underflow: with every parameter strictly positive
    /// any in-domain evidence has positive probability.
    pub fn backward_checked(
        &self,
        theta: &[f64],
        evidence: &Evidence,
        scratch: &mut Scratch,
    ) -> Result<PassResult> {
        let pass = self.backward(theta, evidence, scratch);
        if pass.value > 0.0 {
            Ok(pass)
        } else if theta.iter().all(|&t| t > 0.0) {
            Err(Error::Underflow)
        } else {
            Err(Error::ZeroSupport)
        }
    }
}

fn join(ids: &[NodeId]) -> String {
    ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ")
}

/// `p(x_k, e) = Σ_{pa_k} θ_{x_k|pa_k} · ∂p(e)/∂θ_{x_k|pa_k}` for every value of `k`.
pub fn joint_from_derivatives(
    pass: &PassResult,
    structure: &Structure,
    theta: &[f64],
    evidence: &Evidence,
    k: usize,
) -> Result<Vec<f64>> {
    if evidence.0[k].is_some() {
        return Err(Error::Precondition(format!(
            "node {} is observed in the evidence",
            structure.vars()[k].id
        )));
    }
    let mut out = vec![0.0; structure.cardinality(k)];
    for fam in structure.layout().node_families(k) {
        for (x, j) in fam.range().enumerate() {
            out[x] += theta[j] * pass.gradient[j];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{sample_ground_truth, BayesNet, Observation};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Brute-force marginal of the evidence over all joint states.
    fn enumerate(net: &BayesNet, evidence: &Evidence) -> f64 {
        let s = net.structure();
        let scope: Vec<usize> = (0..s.len()).collect();
        let mut a = vec![0; s.len()];
        let mut total = 0.0;
        for_each_state(&scope, &s.cardinalities(), &mut a, |a| {
            if a.iter().zip(&evidence.0).all(|(&x, e)| e.is_none_or(|v| v == x)) {
                total += net.joint(a);
            }
        });
        total
    }

    fn chain3() -> Structure {
        Structure::builtin("chain3").unwrap()
    }

    #[test]
    fn single_binary_node() {
        let s = Structure::from_edges(&[2], &[]).unwrap();
        let spn = Spn::compile_default(&s);
        let mut sc = Scratch::default();
        let theta = [0.3, 0.7];
        assert!((spn.forward(&theta, &Observation::empty(1), &mut sc) - 1.0).abs() < 1e-15);
        let pass = spn.backward(&theta, &Observation(vec![Some(0)]), &mut sc);
        assert_eq!(pass.value, 0.3);
        assert_eq!(pass.gradient, vec![1.0, 0.0]);
    }

    #[test]
    fn empty_evidence_totals_one() {
        let s = Structure::from_edges(&[2, 2], &[(0, 1)]).unwrap();
        let spn = Spn::compile_default(&s);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut sc = Scratch::default();
        for _ in 0..20 {
            let net = sample_ground_truth(&s, &mut rng);
            let p = spn.forward(net.theta(), &Observation::empty(2), &mut sc);
            assert!((p - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_chain_marginal_is_one_third() {
        let s = chain3();
        let spn = Spn::compile_default(&s);
        let theta = vec![1.0 / 3.0; s.num_params()];
        let e = Observation(vec![None, None, Some(0)]);
        let p = spn.forward(&theta, &e, &mut Scratch::default());
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn orders_agree_with_enumeration() {
        let s = chain3();
        let orders = [[2, 1, 0], [0, 1, 2], [1, 0, 2], [1, 2, 0]];
        let spns: Vec<Spn> = orders.iter().map(|o| Spn::compile(&s, o).unwrap()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut sc = Scratch::default();
        for _ in 0..100 {
            // arbitrary nonnegative parameters: the polynomial identity holds off the simplex
            let theta: Vec<f64> = (0..s.num_params()).map(|_| rng.random::<f64>()).collect();
            let e = Observation(
                (0..3)
                    .map(|_| if rng.random::<bool>() { Some(rng.random_range(0..3)) } else { None })
                    .collect(),
            );
            let values: Vec<f64> = spns.iter().map(|spn| spn.forward(&theta, &e, &mut sc)).collect();
            for v in &values[1..] {
                assert!((v - values[0]).abs() <= 1e-12);
            }
        }
        let net = sample_ground_truth(&s, &mut rng);
        let e = Observation(vec![Some(1), None, Some(2)]);
        let p = spns[0].forward(net.theta(), &e, &mut sc);
        assert!((p - enumerate(&net, &e)).abs() <= 1e-12);
    }

    #[test]
    fn invalid_order_is_rejected() {
        let s = chain3();
        assert!(Spn::compile(&s, &[0, 1]).is_err());
        assert!(Spn::compile(&s, &[0, 1, 1]).is_err());
        assert!(Spn::compile(&s, &[0, 1, 3]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let s = chain3();
        let spn = Spn::compile_default(&s);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = sample_ground_truth(&s, &mut rng);
        let e = Observation(vec![Some(1), None, Some(2)]);
        let mut sc = Scratch::default();
        let pass = spn.backward(net.theta(), &e, &mut sc);
        let h = 1e-6;
        for j in 0..s.num_params() {
            let mut t = net.theta().to_vec();
            t[j] += h;
            let up = spn.forward(&t, &e, &mut sc);
            t[j] -= 2.0 * h;
            let down = spn.forward(&t, &e, &mut sc);
            let fd = (up - down) / (2.0 * h);
            let g = pass.gradient[j];
            assert!((fd - g).abs() <= 1e-5 * g.abs().max(1e-6), "{j}: {fd} vs {g}");
        }
    }

    #[test]
    fn differential_identity_per_node() {
        let s = Structure::builtin("dag9").unwrap();
        let spn = Spn::compile_default(&s);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let net = sample_ground_truth(&s, &mut rng);
        let e = Observation(vec![None, Some(0), None, None, None, None, Some(2), Some(1), None]);
        let pass = spn.backward(net.theta(), &e, &mut Scratch::default());
        assert!(pass.gradient.iter().all(|&g| g >= 0.0));
        for i in 0..s.len() {
            let total: f64 = s
                .layout()
                .node_families(i)
                .iter()
                .flat_map(|f| f.range())
                .map(|j| net.theta()[j] * pass.gradient[j])
                .sum();
            assert!((total - pass.value).abs() <= 1e-12);
        }
    }

    #[test]
    fn gradient_entry_does_not_depend_on_its_parameter() {
        let s = chain3();
        let spn = Spn::compile_default(&s);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let net = sample_ground_truth(&s, &mut rng);
        let e = Observation(vec![None, Some(1), None]);
        let mut sc = Scratch::default();
        let base = spn.backward(net.theta(), &e, &mut sc);
        for j in 0..s.num_params() {
            let mut t = net.theta().to_vec();
            t[j] = rng.random::<f64>();
            let moved = spn.backward(&t, &e, &mut sc);
            assert!((moved.gradient[j] - base.gradient[j]).abs() <= 1e-12);
        }
    }

    #[test]
    fn joint_from_derivatives_marginalizes() {
        let s = Structure::from_edges(&[3], &[]).unwrap();
        let spn = Spn::compile_default(&s);
        let theta = [0.2, 0.5, 0.3];
        let e = Observation::empty(1);
        let pass = spn.backward(&theta, &e, &mut Scratch::default());
        let joint = joint_from_derivatives(&pass, &s, &theta, &e, 0).unwrap();
        assert_eq!(joint, theta.to_vec());

        let s = chain3();
        let spn = Spn::compile_default(&s);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let net = sample_ground_truth(&s, &mut rng);
        let e = Observation(vec![Some(1), None, None]);
        let pass = spn.backward(net.theta(), &e, &mut Scratch::default());
        let joint = joint_from_derivatives(&pass, &s, net.theta(), &e, 2).unwrap();
        assert!((joint.iter().sum::<f64>() - pass.value).abs() <= 1e-12);
        for (x, p) in joint.iter().enumerate() {
            assert!((p - enumerate(&net, &e.with(2, x))).abs() <= 1e-12);
        }
        assert!(matches!(
            joint_from_derivatives(&pass, &s, net.theta(), &e, 0),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn dump_lists_every_node() {
        let s = chain3();
        let spn = Spn::compile_default(&s);
        let dump = spn.dump(&s);
        assert_eq!(dump.lines().count(), spn.nodes().len() + 1);
        assert!(dump.contains("IND X0 0"));
        let stats = spn.stats();
        assert!(stats.sums >= 3);
        assert_eq!(stats.params, s.num_params());
        assert_eq!(stats.indicators, 9);
    }

    #[test]
    fn checked_pass_flags_zero_support() {
        let s = Structure::from_edges(&[2], &[]).unwrap();
        let spn = Spn::compile_default(&s);
        let e = Observation(vec![Some(1)]);
        let err = spn.backward_checked(&[1.0, 0.0], &e, &mut Scratch::default()).unwrap_err();
        assert!(matches!(err, Error::ZeroSupport));
    }
}

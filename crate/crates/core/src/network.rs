//! Discrete Bayesian networks: structure, parameter indexing, sampling and datasets.
//!
//! Every conditional probability table row (a *family*) is stored contiguously in one
//! flat parameter vector. The layout is node-major; within a node, rows are ordered by
//! parent assignment with the first listed parent most significant.

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::ops::Range;

use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance on the sum of every CPT row.
pub const ROW_SUM_TOLERANCE: f64 = 1e-12;

const CHAIN3: &str = include_str!("../networks/chain3.json");
const DAG9: &str = include_str!("../networks/dag9.json");

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variable {
    pub id: String,
    pub cardinality: usize,
    pub parents: Vec<usize>,
}

/// One CPT row: the parameters `θ_{x|pa}` for a fixed node and parent assignment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Family {
    pub node: usize,
    pub parent_config: usize,
    pub offset: usize,
    pub len: usize,
}

impl Family {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Bijection between `(node, parent assignment, value)` and flat parameter positions.
#[derive(Clone, Debug)]
pub struct ParamLayout {
    node_offset: Vec<usize>,
    parent_configs: Vec<usize>,
    families: Vec<Family>,
    family_of: Vec<usize>,
}

impl ParamLayout {
    fn new(vars: &[Variable]) -> Self {
        let mut node_offset = Vec::with_capacity(vars.len());
        let mut parent_configs = Vec::with_capacity(vars.len());
        let mut families = Vec::new();
        let mut family_of = Vec::new();
        let mut offset = 0;
        for (node, var) in vars.iter().enumerate() {
            let configs: usize = var.parents.iter().map(|&p| vars[p].cardinality).product();
            node_offset.push(offset);
            parent_configs.push(configs);
            for parent_config in 0..configs {
                family_of.extend(std::iter::repeat_n(families.len(), var.cardinality));
                families.push(Family { node, parent_config, offset, len: var.cardinality });
                offset += var.cardinality;
            }
        }
        Self { node_offset, parent_configs, families, family_of }
    }

    /// Total number of parameters `P`.
    pub fn len(&self) -> usize {
        self.family_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.family_of.is_empty()
    }

    pub fn families(&self) -> &[Family] {
        &self.families
    }

    /// Families belonging to one node, in parent-configuration order.
    pub fn node_families(&self, node: usize) -> &[Family] {
        let start = self.families.partition_point(|f| f.node < node);
        &self.families[start..start + self.parent_configs[node]]
    }

    pub fn family_of(&self, index: usize) -> &Family {
        &self.families[self.family_of[index]]
    }

    pub fn family_index_of(&self, index: usize) -> usize {
        self.family_of[index]
    }

    pub fn parent_configs(&self, node: usize) -> usize {
        self.parent_configs[node]
    }

    pub fn index(&self, node: usize, parent_config: usize, value: usize) -> usize {
        let card = self.families[self.family_of[self.node_offset[node]]].len;
        debug_assert!(parent_config < self.parent_configs[node] && value < card);
        self.node_offset[node] + parent_config * card + value
    }

    /// `(node, parent_config, value)` for a flat position.
    pub fn decode(&self, index: usize) -> (usize, usize, usize) {
        let fam = self.family_of(index);
        (fam.node, fam.parent_config, index - fam.offset)
    }
}

/// Variables, parent sets and the derived parameter layout. Immutable once built.
#[derive(Clone, Debug)]
pub struct Structure {
    vars: Vec<Variable>,
    order: Vec<usize>,
    layout: ParamLayout,
}

impl Structure {
    pub fn new(vars: Vec<Variable>) -> Result<Self> {
        let n = vars.len();
        for (i, v) in vars.iter().enumerate() {
            if v.cardinality < 2 {
                return Err(Error::Structure(format!(
                    "node {} has cardinality {} (need at least 2)",
                    v.id, v.cardinality
                )));
            }
            for (k, &p) in v.parents.iter().enumerate() {
                if p >= n {
                    return Err(Error::Structure(format!("node {} has unknown parent {p}", v.id)));
                }
                if p == i || v.parents[..k].contains(&p) {
                    return Err(Error::Structure(format!(
                        "node {} lists parent {} twice or as itself",
                        v.id, vars[p].id
                    )));
                }
            }
            if vars[..i].iter().any(|w| w.id == v.id) {
                return Err(Error::Structure(format!("duplicate node id {}", v.id)));
            }
        }
        let parents: Vec<Vec<usize>> = vars.iter().map(|v| v.parents.clone()).collect();
        let order = topo_order(&parents)?;
        let layout = ParamLayout::new(&vars);
        Ok(Self { vars, order, layout })
    }

    /// Builds a structure from cardinalities and `parent -> child` edges; node ids are `X0..`.
    pub fn from_edges(cardinalities: &[usize], edges: &[(usize, usize)]) -> Result<Self> {
        let mut vars: Vec<Variable> = cardinalities
            .iter()
            .enumerate()
            .map(|(i, &c)| Variable { id: format!("X{i}"), cardinality: c, parents: vec![] })
            .collect();
        for &(p, c) in edges {
            if c >= vars.len() {
                return Err(Error::Structure(format!("edge to unknown node {c}")));
            }
            vars[c].parents.push(p);
        }
        Self::new(vars)
    }

    pub fn builtin(name: &str) -> Result<Self> {
        let text = match name {
            "chain3" => CHAIN3,
            "dag9" => DAG9,
            other => return Err(Error::Argument(format!("unknown built-in structure {other:?}"))),
        };
        Ok(NetworkSpec::from_json(text)?.into_parts()?.0)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn vars(&self) -> &[Variable] {
        &self.vars
    }

    pub fn cardinality(&self, node: usize) -> usize {
        self.vars[node].cardinality
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.vars.iter().map(|v| v.cardinality).collect()
    }

    pub fn parents(&self, node: usize) -> &[usize] {
        &self.vars[node].parents
    }

    /// Nodes in a topological order (parents first).
    pub fn topo_order(&self) -> &[usize] {
        &self.order
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.layout.len()
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.vars.iter().position(|v| v.id == id)
    }

    /// Nodes without children.
    pub fn leaves(&self) -> Vec<usize> {
        let mut has_child = vec![false; self.len()];
        for v in &self.vars {
            for &p in &v.parents {
                has_child[p] = true;
            }
        }
        (0..self.len()).filter(|&i| !has_child[i]).collect()
    }

    /// Parent configuration index of `node` under a complete assignment.
    pub fn parent_config(&self, node: usize, assignment: &[usize]) -> usize {
        self.vars[node]
            .parents
            .iter()
            .fold(0, |acc, &p| acc * self.vars[p].cardinality + assignment[p])
    }

    /// Decodes a parent configuration index into `(parent, value)` pairs.
    pub fn parent_values(&self, node: usize, mut config: usize) -> Vec<(usize, usize)> {
        let parents = &self.vars[node].parents;
        let mut out = vec![(0, 0); parents.len()];
        for (slot, &p) in parents.iter().enumerate().rev() {
            let card = self.vars[p].cardinality;
            out[slot] = (p, config % card);
            config /= card;
        }
        out
    }

    /// Cardinality of the child node for every flat parameter position.
    pub fn child_cardinalities(&self) -> Vec<f64> {
        (0..self.num_params())
            .map(|j| self.layout.family_of(j).len as f64)
            .collect()
    }
}

/// Kahn's algorithm over per-node parent lists. Ties are broken by node index.
pub fn topo_order(parents: &[Vec<usize>]) -> Result<Vec<usize>> {
    let n = parents.len();
    let mut indegree = vec![0usize; n];
    let mut children = vec![Vec::new(); n];
    for (c, ps) in parents.iter().enumerate() {
        for &p in ps {
            if p >= n {
                return Err(Error::Structure(format!("unknown parent {p} of node {c}")));
            }
            indegree[c] += 1;
            children[p].push(c);
        }
    }
    let mut ready: VecDeque<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(i) = ready.pop_front() {
        order.push(i);
        for &c in &children[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.push_back(c);
            }
        }
    }
    if order.len() != n {
        let stuck: Vec<usize> = (0..n).filter(|&i| indegree[i] > 0).collect();
        return Err(Error::Structure(format!("cycle detected among nodes {stuck:?}")));
    }
    Ok(order)
}

/// A structure together with a full parameter assignment.
#[derive(Clone, Debug)]
pub struct BayesNet {
    structure: Structure,
    theta: Vec<f64>,
}

impl BayesNet {
    pub fn new(structure: Structure, theta: Vec<f64>) -> Result<Self> {
        check_theta(&structure, &theta)?;
        Ok(Self { structure, theta })
    }

    pub fn structure(&self) -> &Structure {
        &self.structure
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    /// `p(x_1, ..., x_n; θ)` for a complete assignment.
    pub fn joint(&self, assignment: &[usize]) -> f64 {
        let s = &self.structure;
        (0..s.len())
            .map(|i| {
                let pa = s.parent_config(i, assignment);
                self.theta[s.layout.index(i, pa, assignment[i])]
            })
            .product()
    }
}

/// Validates length, range and per-family normalization of a parameter vector.
pub fn check_theta(structure: &Structure, theta: &[f64]) -> Result<()> {
    if theta.len() != structure.num_params() {
        return Err(Error::Argument(format!(
            "expected {} parameters, got {}",
            structure.num_params(),
            theta.len()
        )));
    }
    if let Some(j) = theta.iter().position(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::Argument(format!("parameter {j} = {} outside [0, 1]", theta[j])));
    }
    for fam in structure.layout.families() {
        let sum: f64 = theta[fam.range()].iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(Error::Argument(format!(
                "CPT row {} of node {} sums to {sum}",
                fam.parent_config, structure.vars[fam.node].id
            )));
        }
    }
    Ok(())
}

/// Draws every CPT row independently from the flat Dirichlet.
pub fn sample_ground_truth<R: Rng + ?Sized>(structure: &Structure, rng: &mut R) -> BayesNet {
    let mut theta = vec![0.0; structure.num_params()];
    for fam in structure.layout.families() {
        let row = &mut theta[fam.range()];
        for t in row.iter_mut() {
            *t = rng.sample::<f64, _>(Exp1);
        }
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|t| *t /= total);
    }
    BayesNet { structure: structure.clone(), theta }
}

/// Index drawn from a categorical row given a uniform variate.
fn pick(row: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (x, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return x;
        }
    }
    // rounding left `u` past the final cumulative sum
    row.iter().rposition(|&p| p > 0.0).unwrap_or(row.len() - 1)
}

/// One complete assignment drawn from the joint distribution.
pub fn sample_assignment<R: Rng + ?Sized>(net: &BayesNet, rng: &mut R) -> Vec<usize> {
    let s = &net.structure;
    let mut values = vec![0; s.len()];
    for &i in s.topo_order() {
        let pa = s.parent_config(i, &values);
        let fam = s.layout.node_families(i)[pa];
        values[i] = pick(&net.theta[fam.range()], rng.random::<f64>());
    }
    values
}

/// i.i.d. complete rows from the joint distribution.
pub fn ancestral_sample<R: Rng + ?Sized>(net: &BayesNet, count: usize, rng: &mut R) -> Dataset {
    let rows = (0..count)
        .map(|_| Observation::complete(&sample_assignment(net, rng)))
        .collect();
    Dataset { num_nodes: net.structure.len(), rows }
}

/// Keeps each cell independently with probability `retain`. One uniform draw is consumed per
/// cell whatever `retain` is, so masks for different fractions share a random stream.
pub fn mask_cells<R: Rng + ?Sized>(data: &Dataset, retain: f64, rng: &mut R) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&retain) {
        return Err(Error::Argument(format!("retention fraction {retain} outside [0, 1]")));
    }
    let rows = data
        .rows
        .iter()
        .map(|row| {
            Observation(
                row.0
                    .iter()
                    .map(|&cell| {
                        let keep = rng.random::<f64>() < retain;
                        cell.filter(|_| keep)
                    })
                    .collect(),
            )
        })
        .collect();
    Ok(Dataset { num_nodes: data.num_nodes, rows })
}

/// Hides every cell outside `keep`.
pub fn mask_pattern(data: &Dataset, keep: &[usize]) -> Result<Dataset> {
    if let Some(&bad) = keep.iter().find(|&&k| k >= data.num_nodes) {
        return Err(Error::Argument(format!("unknown node {bad}")));
    }
    let mut kept = vec![false; data.num_nodes];
    keep.iter().for_each(|&k| kept[k] = true);
    let rows = data
        .rows
        .iter()
        .map(|row| Observation(row.0.iter().zip(&kept).map(|(&c, &k)| c.filter(|_| k)).collect()))
        .collect();
    Ok(Dataset { num_nodes: data.num_nodes, rows })
}

/// Per-node optional values. Also used as evidence for inference.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Observation(pub Vec<Option<usize>>);

pub type Evidence = Observation;

impl Observation {
    pub fn empty(num_nodes: usize) -> Self {
        Self(vec![None; num_nodes])
    }

    pub fn complete(values: &[usize]) -> Self {
        Self(values.iter().map(|&v| Some(v)).collect())
    }

    pub fn get(&self, node: usize) -> Option<usize> {
        self.0[node]
    }

    pub fn with(&self, node: usize, value: usize) -> Self {
        let mut out = self.clone();
        out.0[node] = Some(value);
        out
    }

    pub fn num_observed(&self) -> usize {
        self.0.iter().filter(|c| c.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.num_observed() == 0
    }

    pub fn pattern(&self) -> ObservationPattern {
        ObservationPattern(
            self.0.iter().enumerate().filter(|(_, c)| c.is_some()).map(|(i, _)| i).collect(),
        )
    }

    pub fn check(&self, structure: &Structure) -> Result<()> {
        if self.0.len() != structure.len() {
            return Err(Error::Format(format!(
                "observation has {} cells, network has {} nodes",
                self.0.len(),
                structure.len()
            )));
        }
        for (i, cell) in self.0.iter().enumerate() {
            if let Some(v) = *cell {
                if v >= structure.cardinality(i) {
                    return Err(Error::Format(format!(
                        "value {v} outside the domain of {}",
                        structure.vars()[i].id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// The set of observed nodes of one row, sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ObservationPattern(pub Vec<usize>);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub num_nodes: usize,
    pub rows: Vec<Observation>,
}

impl Dataset {
    pub fn new(structure: &Structure, rows: Vec<Observation>) -> Result<Self> {
        for row in &rows {
            row.check(structure)?;
        }
        Ok(Self { num_nodes: structure.len(), rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Fraction of observed cells over the whole table.
    pub fn observed_fraction(&self) -> f64 {
        let cells = self.rows.len() * self.num_nodes;
        if cells == 0 {
            return 0.0;
        }
        let seen: usize = self.rows.iter().map(Observation::num_observed).sum();
        seen as f64 / cells as f64
    }

    /// Distinct rows with their multiplicities, in first-seen order. Rows without any observed
    /// cell are dropped: their likelihood is identically 1.
    pub fn grouped(&self) -> Vec<(Observation, usize)> {
        let mut index = std::collections::HashMap::<_, usize>::new();
        let mut out: Vec<(Observation, usize)> = Vec::new();
        for row in self.rows.iter().filter(|r| !r.is_empty()) {
            match index.get(row) {
                Some(&k) => out[k].1 += 1,
                None => {
                    index.insert(row.clone(), out.len());
                    out.push((row.clone(), 1));
                }
            }
        }
        out
    }

    /// Distinct non-empty observation patterns with multiplicities, in first-seen order.
    pub fn patterns(&self) -> Vec<(ObservationPattern, usize)> {
        let mut index = std::collections::HashMap::<_, usize>::new();
        let mut out: Vec<(ObservationPattern, usize)> = Vec::new();
        for row in self.rows.iter().filter(|r| !r.is_empty()) {
            let pat = row.pattern();
            match index.get(&pat) {
                Some(&k) => out[k].1 += 1,
                None => {
                    index.insert(pat.clone(), out.len());
                    out.push((pat, 1));
                }
            }
        }
        out
    }

    /// CSV with a header of node ids; `?` marks a missing cell.
    pub fn write_csv<W: Write>(&self, structure: &Structure, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(structure.vars().iter().map(|v| v.id.as_str()))?;
        for row in &self.rows {
            w.write_record(row.0.iter().map(|c| match c {
                Some(v) => v.to_string(),
                None => "?".to_string(),
            }))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(structure: &Structure, reader: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = r.headers()?.clone();
        let ids: Vec<&str> = structure.vars().iter().map(|v| v.id.as_str()).collect();
        if header.iter().collect::<Vec<_>>() != ids {
            return Err(Error::Format(format!(
                "dataset header {:?} does not match network nodes {ids:?}",
                header.iter().collect::<Vec<_>>()
            )));
        }
        let mut rows = Vec::new();
        for (line, record) in r.records().enumerate() {
            let record = record?;
            let cells = record
                .iter()
                .map(|cell| match cell {
                    "?" => Ok(None),
                    v => v.parse::<usize>().map(Some).map_err(|_| {
                        Error::Format(format!("line {}: bad cell {v:?}", line + 2))
                    }),
                })
                .collect::<Result<Vec<_>>>()?;
            let obs = Observation(cells);
            obs.check(structure)
                .map_err(|e| Error::Format(format!("line {}: {e}", line + 2)))?;
            rows.push(obs);
        }
        Ok(Self { num_nodes: structure.len(), rows })
    }
}

/// On-disk network description.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub nodes: Vec<NodeSpec>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: String,
    pub cardinality: usize,
    #[serde(default)]
    pub parents: Vec<String>,
    /// Row-major CPT: one row per parent assignment, first parent most significant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cpt: Option<Vec<f64>>,
}

impl NetworkSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("network file: {e}")))
    }

    /// Structure plus parameters when every node carries a CPT. Rows are renormalized when
    /// they are within 1e-6 of summing to one.
    pub fn into_parts(self) -> Result<(Structure, Option<Vec<f64>>)> {
        let ids: Vec<String> = self.nodes.iter().map(|n| n.id.clone()).collect();
        let vars = self
            .nodes
            .iter()
            .map(|n| {
                let parents = n
                    .parents
                    .iter()
                    .map(|p| {
                        ids.iter().position(|id| id == p).ok_or_else(|| {
                            Error::Structure(format!("node {} has unknown parent {p}", n.id))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Variable { id: n.id.clone(), cardinality: n.cardinality, parents })
            })
            .collect::<Result<Vec<_>>>()?;
        let structure = Structure::new(vars)?;
        let with_cpt = self.nodes.iter().filter(|n| n.cpt.is_some()).count();
        if with_cpt == 0 {
            return Ok((structure, None));
        }
        if with_cpt != self.nodes.len() {
            return Err(Error::Format("either every node or no node must carry a cpt".into()));
        }
        let mut theta = Vec::with_capacity(structure.num_params());
        for (i, n) in self.nodes.into_iter().enumerate() {
            let cpt = n.cpt.unwrap_or_default();
            let expected = structure.layout().parent_configs(i) * structure.cardinality(i);
            if cpt.len() != expected {
                return Err(Error::Format(format!(
                    "cpt of {} has {} entries, expected {expected}",
                    n.id,
                    cpt.len()
                )));
            }
            theta.extend(cpt);
        }
        for fam in structure.layout().families() {
            let row = &mut theta[fam.range()];
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&t| t < 0.0) {
                return Err(Error::Format(format!(
                    "cpt row {} of {} is not a probability vector",
                    fam.parent_config,
                    structure.vars()[fam.node].id
                )));
            }
            row.iter_mut().for_each(|t| *t /= sum);
        }
        Ok((structure, Some(theta)))
    }

    pub fn from_structure(structure: &Structure, theta: Option<&[f64]>) -> Self {
        let nodes = structure
            .vars()
            .iter()
            .enumerate()
            .map(|(i, v)| NodeSpec {
                id: v.id.clone(),
                cardinality: v.cardinality,
                parents: v.parents.iter().map(|&p| structure.vars()[p].id.clone()).collect(),
                cpt: theta.map(|t| {
                    let fams = structure.layout().node_families(i);
                    t[fams[0].offset..fams[fams.len() - 1].range().end].to_vec()
                }),
            })
            .collect();
        Self { nodes }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chain(n: usize, card: usize) -> Structure {
        let edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        Structure::from_edges(&vec![card; n], &edges).unwrap()
    }

    #[test]
    fn topo_order_of_chain_and_singleton() {
        assert_eq!(chain(3, 2).topo_order(), &[0, 1, 2]);
        assert_eq!(Structure::from_edges(&[2], &[]).unwrap().topo_order(), &[0]);
        // order must respect edges even when indices do not
        let s = Structure::from_edges(&[2, 2, 2], &[(2, 0), (0, 1)]).unwrap();
        assert_eq!(s.topo_order(), &[2, 0, 1]);
    }

    #[test]
    fn two_cycle_is_rejected() {
        let err = Structure::from_edges(&[2, 2], &[(1, 0), (0, 1)]).unwrap_err();
        assert!(matches!(err, Error::Structure(_)));
    }

    #[test]
    fn layout_is_a_bijection() {
        let s = Structure::builtin("dag9").unwrap();
        let layout = s.layout();
        assert_eq!(layout.len(), 3 + 8 * 9);
        let mut seen = vec![false; layout.len()];
        for i in 0..s.len() {
            for pa in 0..layout.parent_configs(i) {
                for x in 0..s.cardinality(i) {
                    let j = layout.index(i, pa, x);
                    assert!(!seen[j]);
                    seen[j] = true;
                    assert_eq!(layout.decode(j), (i, pa, x));
                }
            }
        }
        assert!(seen.into_iter().all(|b| b));
        let covered: usize = layout.families().iter().map(|f| f.len).sum();
        assert_eq!(covered, layout.len());
    }

    #[test]
    fn parent_config_roundtrip() {
        let s = Structure::from_edges(&[2, 3, 4], &[(0, 2), (1, 2)]).unwrap();
        for a in 0..2 {
            for b in 0..3 {
                let cfg = s.parent_config(2, &[a, b, 0]);
                assert_eq!(cfg, a * 3 + b);
                assert_eq!(s.parent_values(2, cfg), vec![(0, a), (1, b)]);
            }
        }
    }

    #[test]
    fn ground_truth_rows_are_normalized() {
        let s = Structure::builtin("dag9").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let net = sample_ground_truth(&s, &mut rng);
            check_theta(&s, net.theta()).unwrap();
        }
    }

    #[test]
    fn flat_dirichlet_rows_have_uniform_mean() {
        let s = Structure::from_edges(&[3], &[]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut mean = [0.0; 3];
        let n = 100_000;
        for _ in 0..n {
            let net = sample_ground_truth(&s, &mut rng);
            for (m, t) in mean.iter_mut().zip(net.theta()) {
                *m += t / n as f64;
            }
        }
        for m in mean {
            assert!((m - 1.0 / 3.0).abs() < 0.01, "{m}");
        }
    }

    #[test]
    fn deterministic_cpts_force_the_sample() {
        let s = chain(3, 3);
        // X0 = 2, X1 = (X0 + 1) mod 3, X2 = X1
        let mut theta = vec![0.0; s.num_params()];
        let l = s.layout();
        theta[l.index(0, 0, 2)] = 1.0;
        for pa in 0..3 {
            theta[l.index(1, pa, (pa + 1) % 3)] = 1.0;
            theta[l.index(2, pa, pa)] = 1.0;
        }
        let net = BayesNet::new(s, theta).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = ancestral_sample(&net, 200, &mut rng);
        assert!(data.rows.iter().all(|r| r.0 == vec![Some(2), Some(0), Some(0)]));
        assert!(ancestral_sample(&net, 0, &mut rng).is_empty());
    }

    #[test]
    fn ancestral_sampling_matches_joint() {
        let s = chain(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = sample_ground_truth(&s, &mut rng);
        let n = 100_000;
        let data = ancestral_sample(&net, n, &mut rng);
        let mut counts = [[0usize; 2]; 2];
        for row in &data.rows {
            counts[row.0[0].unwrap()][row.0[1].unwrap()] += 1;
        }
        for a in 0..2 {
            for b in 0..2 {
                let exact = net.joint(&[a, b]);
                let emp = counts[a][b] as f64 / n as f64;
                assert!((exact - emp).abs() <= 0.01);
            }
        }
    }

    #[test]
    fn masking_fractions() {
        let s = Structure::builtin("dag9").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = sample_ground_truth(&s, &mut rng);
        let data = ancestral_sample(&net, 10_000, &mut rng);
        assert_eq!(mask_cells(&data, 1.0, &mut rng).unwrap(), data);
        let none = mask_cells(&data, 0.0, &mut rng).unwrap();
        assert_eq!(none.observed_fraction(), 0.0);
        let half = mask_cells(&data, 0.5, &mut rng).unwrap();
        assert_eq!(half.len(), data.len());
        assert!((half.observed_fraction() - 0.5).abs() <= 0.01);
        assert!(mask_cells(&data, 1.5, &mut rng).is_err());
        assert!(mask_cells(&data, -0.1, &mut rng).is_err());
    }

    #[test]
    fn pattern_masking() {
        let s = Structure::builtin("dag9").unwrap();
        assert_eq!(s.leaves(), vec![6, 7, 8]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = sample_ground_truth(&s, &mut rng);
        let data = ancestral_sample(&net, 50, &mut rng);
        let all: Vec<usize> = (0..9).collect();
        assert_eq!(mask_pattern(&data, &all).unwrap(), data);
        let leaves = mask_pattern(&data, &[6, 7, 8]).unwrap();
        assert!(leaves.rows.iter().all(|r| r.pattern().0 == vec![6, 7, 8]));
        assert_eq!(mask_pattern(&data, &[]).unwrap().observed_fraction(), 0.0);
        assert!(mask_pattern(&data, &[9]).is_err());
    }

    #[test]
    fn csv_roundtrip_with_missing_cells() {
        let s = chain(3, 3);
        let data = Dataset::new(
            &s,
            vec![Observation(vec![Some(0), None, Some(2)]), Observation(vec![None, None, None])],
        )
        .unwrap();
        let mut buf = Vec::new();
        data.write_csv(&s, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "X0,X1,X2\n0,?,2\n?,?,?\n");
        assert_eq!(Dataset::read_csv(&s, &buf[..]).unwrap(), data);
        assert!(Dataset::read_csv(&s, "X0,X1,X2\n0,3,1\n".as_bytes()).is_err());
        assert!(Dataset::read_csv(&s, "X0,X2,X1\n0,1,1\n".as_bytes()).is_err());
    }

    #[test]
    fn network_spec_with_cpts() {
        let text = r#"{"nodes":[
            {"id":"A","cardinality":2,"parents":[],"cpt":[0.3,0.7]},
            {"id":"B","cardinality":2,"parents":["A"],"cpt":[0.9,0.1,0.2,0.8]}]}"#;
        let (s, theta) = NetworkSpec::from_json(text).unwrap().into_parts().unwrap();
        let net = BayesNet::new(s, theta.unwrap()).unwrap();
        assert!((net.joint(&[1, 0]) - 0.7 * 0.2).abs() < 1e-15);
        let back = NetworkSpec::from_structure(net.structure(), Some(net.theta()));
        assert_eq!(back.nodes[1].cpt.as_deref(), Some(&[0.9, 0.1, 0.2, 0.8][..]));
        let cyclic = r#"{"nodes":[{"id":"A","cardinality":2,"parents":["B"]},
            {"id":"B","cardinality":2,"parents":["A"]}]}"#;
        assert!(NetworkSpec::from_json(cyclic).unwrap().into_parts().is_err());
    }
}

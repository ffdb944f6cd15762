//! Second-order queries: mean and variance of `p(x_k | e)` under a parameter posterior,
//! propagated with the delta method.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::network::{Evidence, Structure};
use crate::posterior::GaussianPosterior;
use crate::spn::{joint_from_derivatives, PassResult, Scratch, Spn};

#[derive(Clone, Debug, PartialEq)]
pub struct QueryResult {
    pub node: usize,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

/// One line of query output.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QueryRecord {
    pub node: String,
    pub value: usize,
    pub mean: f64,
    pub variance: f64,
}

impl QueryResult {
    pub fn records(&self, structure: &Structure) -> Vec<QueryRecord> {
        self.mean
            .iter()
            .zip(&self.variance)
            .enumerate()
            .map(|(value, (&mean, &variance))| QueryRecord {
                node: structure.vars()[self.node].id.clone(),
                value,
                mean,
                variance,
            })
            .collect()
    }
}

fn evidence_pass(
    spn: &Spn,
    posterior: &GaussianPosterior,
    evidence: &Evidence,
    scratch: &mut Scratch,
) -> Result<PassResult> {
    let pass = spn.backward(&posterior.mean, evidence, scratch);
    if !(pass.value > 0.0) {
        return Err(Error::ZeroSupport);
    }
    Ok(pass)
}

fn query_with(
    spn: &Spn,
    structure: &Structure,
    posterior: &GaussianPosterior,
    evidence: &Evidence,
    base: &PassResult,
    k: usize,
    scratch: &mut Scratch,
) -> Result<QueryResult> {
    let theta = &posterior.mean;
    let joint = joint_from_derivatives(base, structure, theta, evidence, k)?;
    let pe = base.value;
    let mut mean = Vec::with_capacity(joint.len());
    let mut variance = Vec::with_capacity(joint.len());
    let mut g = vec![0.0; theta.len()];
    for (x, &pxe) in joint.iter().enumerate() {
        let with = spn.backward(theta, &evidence.with(k, x), scratch);
        // ∇[p(x,e)/p(e)] = (∇p(x,e) p(e) - p(x,e) ∇p(e)) / p(e)²
        for (j, gj) in g.iter_mut().enumerate() {
            *gj = (with.gradient[j] * pe - pxe * base.gradient[j]) / (pe * pe);
        }
        let mu = (pxe / pe).clamp(0.0, 1.0);
        // the delta method knows nothing of the [0, 1] range; cap at the Bernoulli bound
        let var = posterior.quadratic_form(&g).max(0.0).min(mu * (1.0 - mu));
        mean.push(mu);
        variance.push(var);
    }
    Ok(QueryResult { node: k, mean, variance })
}

/// Mean and variance of `p(X_k = x | e)` for every value `x`.
pub fn query_second_order(
    spn: &Spn,
    structure: &Structure,
    posterior: &GaussianPosterior,
    evidence: &Evidence,
    k: usize,
) -> Result<QueryResult> {
    let mut scratch = Scratch::default();
    let base = evidence_pass(spn, posterior, evidence, &mut scratch)?;
    query_with(spn, structure, posterior, evidence, &base, k, &mut scratch)
}

/// One result per unobserved node, in node order, sharing the evidence-only pass.
pub fn query_all(
    spn: &Spn,
    structure: &Structure,
    posterior: &GaussianPosterior,
    evidence: &Evidence,
) -> Result<Vec<QueryResult>> {
    let mut scratch = Scratch::default();
    let unobserved: Vec<usize> = (0..structure.len()).filter(|&k| evidence.0[k].is_none()).collect();
    if unobserved.is_empty() {
        return Ok(Vec::new());
    }
    let base = evidence_pass(spn, posterior, evidence, &mut scratch)?;
    unobserved
        .into_iter()
        .map(|k| query_with(spn, structure, posterior, evidence, &base, k, &mut scratch))
        .collect()
}

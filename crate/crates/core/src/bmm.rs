//! Online Bayesian moment matching over a product of Dirichlets.
//!
//! After each observation the exact posterior is a mixture of Dirichlet products; it is
//! projected back onto a single product by matching, per family, the first moments exactly
//! and the second moments in the least-squares sense through the Dirichlet strength.
//!
//! The required expectations factor because the network polynomial contains exactly one
//! parameter of every node in each monomial: writing `d` for the circuit derivatives at the
//! posterior means, `E[θ^k p(e; θ)]` for a parameter of node `i` only involves mixed moments
//! within its own family.

use log::debug;

use crate::error::{Error, Result};
use crate::network::{Dataset, Evidence, Structure};
use crate::posterior::{dirichlet_mixed_moment, DirichletProduct};
use crate::spn::{Scratch, Spn};

/// Strength updates whose denominator falls below this keep the previous strength.
pub const STRENGTH_GUARD: f64 = 1e-15;

#[derive(Clone, Debug, PartialEq)]
pub struct BmmState {
    pub posterior: DirichletProduct,
    /// Number of observations assimilated.
    pub t: usize,
}

/// Posterior first and second raw moments of every parameter after one observation.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    /// `E[θ_j | e]`
    pub first: Vec<f64>,
    /// `E[θ_j² | e]`
    pub second: Vec<f64>,
    /// `p(e)` at the prior means, the normalizer `Z[0]`.
    pub evidence: f64,
    update: Vec<FamilyUpdate>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum FamilyUpdate {
    /// Derivatives constant across the family: the observation carries no information on it.
    Untouched,
    /// The observation pins the node and its parents: exact conjugate increment of one value.
    Conjugate(usize),
    Matched,
}

#[derive(Clone, Debug)]
pub struct BmmFit {
    pub posterior: DirichletProduct,
    /// Rows skipped because they had zero probability under the running means.
    pub skipped: usize,
}

impl BmmState {
    /// Flat Dirichlet prior on every family.
    pub fn new(structure: &Structure) -> Self {
        Self { posterior: DirichletProduct::uniform(structure.layout()), t: 0 }
    }

    pub fn moments(
        &self,
        spn: &Spn,
        structure: &Structure,
        evidence: &Evidence,
        scratch: &mut Scratch,
    ) -> Result<Moments> {
        if evidence.is_empty() {
            return Err(Error::Precondition("moment matching needs an observed cell".into()));
        }
        let layout = structure.layout();
        let alpha = &self.posterior.alpha;
        let means = self.posterior.means(layout);
        let pass = spn.backward(&means, evidence, scratch);
        let z0 = pass.value;
        if !(z0 > 0.0) {
            return Err(Error::ZeroSupport);
        }
        let mut first = means.clone();
        let mut second = vec![0.0; layout.len()];
        let mut update = Vec::with_capacity(layout.families().len());
        let mut exps = Vec::new();
        for fam in layout.families() {
            let range = fam.range();
            let a = &alpha[range.clone()];
            let d = &pass.gradient[range.clone()];
            let m = &means[range.clone()];
            if d.iter().all(|&v| v == d[0]) {
                let s: f64 = a.iter().sum();
                for (k, &ak) in a.iter().enumerate() {
                    second[fam.offset + k] = ak * (ak + 1.0) / (s * (s + 1.0));
                }
                update.push(FamilyUpdate::Untouched);
                continue;
            }
            // p(e; θ) = θ_x ∂p/∂θ_x with the derivative free of this node's parameters
            let pinned = layout
                .node_families(fam.node)
                .iter()
                .flat_map(|f| f.range())
                .filter(|&j| pass.gradient[j] != 0.0)
                .collect::<Vec<_>>();
            if let [j] = pinned[..] {
                let x = j - fam.offset;
                let s: f64 = a.iter().sum();
                for (k, &ak) in a.iter().enumerate() {
                    let hit = (k == x) as u32 as f64;
                    first[fam.offset + k] = (ak + hit) / (s + 1.0);
                    second[fam.offset + k] = (ak + hit) * (ak + hit + 1.0) / ((s + 1.0) * (s + 2.0));
                }
                update.push(FamilyUpdate::Conjugate(x));
                continue;
            }
            update.push(FamilyUpdate::Matched);
            // contribution of the node's other families, which are independent of this one
            let own: f64 = m.iter().zip(d).map(|(m, d)| m * d).sum();
            let rest = z0 - own;
            exps.clear();
            exps.resize(fam.len, 0u32);
            for x in 0..fam.len {
                let mut z = [0.0; 2];
                for (k, zk) in z.iter_mut().enumerate() {
                    let power = k as u32 + 1;
                    exps[x] = power;
                    let marginal = dirichlet_mixed_moment(a, &exps)?;
                    let mut acc = rest * marginal;
                    for (xp, &dx) in d.iter().enumerate() {
                        if dx == 0.0 {
                            continue;
                        }
                        exps[xp] += 1;
                        acc += dirichlet_mixed_moment(a, &exps)? * dx;
                        exps[xp] -= 1;
                    }
                    exps[x] = 0;
                    *zk = acc;
                }
                first[fam.offset + x] = z[0] / z0;
                second[fam.offset + x] = z[1] / z0;
            }
        }
        Ok(Moments { first, second, evidence: z0, update })
    }

    /// Projects the one-step posterior back onto a Dirichlet product.
    pub fn assimilate(&mut self, structure: &Structure, moments: &Moments) {
        let layout = structure.layout();
        for (f, fam) in layout.families().iter().enumerate() {
            let range = fam.range();
            match moments.update[f] {
                FamilyUpdate::Untouched => continue,
                FamilyUpdate::Conjugate(x) => {
                    self.posterior.alpha[fam.offset + x] += 1.0;
                    continue;
                }
                FamilyUpdate::Matched => {}
            }
            let prev: f64 = self.posterior.alpha[range.clone()].iter().sum();
            let (mut num, mut den) = (0.0, 0.0);
            for j in range.clone() {
                let (m, v) = (moments.first[j], moments.second[j]);
                num += m * (1.0 - m) * (m - v);
                den += m * (1.0 - m) * (v - m * m);
            }
            let strength = num / den;
            let strength = if den > STRENGTH_GUARD && strength.is_finite() && strength > 0.0 {
                strength
            } else {
                debug!("degenerate strength update for family {f} (num={num:e}, den={den:e})");
                prev
            };
            let total: f64 = moments.first[range.clone()].iter().sum();
            for j in range {
                self.posterior.alpha[j] = moments.first[j] / total * strength;
            }
        }
        self.t += 1;
    }

    pub fn update(
        &mut self,
        spn: &Spn,
        structure: &Structure,
        evidence: &Evidence,
        scratch: &mut Scratch,
    ) -> Result<()> {
        let moments = self.moments(spn, structure, evidence, scratch)?;
        self.assimilate(structure, &moments);
        Ok(())
    }
}

/// Folds every row into the posterior in dataset order. Rows without observed cells leave
/// the posterior unchanged and are passed over.
pub fn fit(spn: &Spn, structure: &Structure, data: &Dataset) -> BmmFit {
    let mut state = BmmState::new(structure);
    let mut scratch = Scratch::default();
    let mut skipped = 0;
    for row in data.rows.iter().filter(|r| !r.is_empty()) {
        match state.update(spn, structure, row, &mut scratch) {
            Ok(()) => {}
            Err(Error::ZeroSupport) => skipped += 1,
            Err(e) => unreachable!("moment matching on a validated row failed: {e}"),
        }
    }
    BmmFit { posterior: state.posterior, skipped }
}

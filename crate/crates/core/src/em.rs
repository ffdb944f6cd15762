//! Expectation-maximization for MAP parameters under missing data, and the two covariance
//! estimators built on it: the outer-product Hessian approximation and the Fisher
//! information.
//!
//! Both information matrices live in the full parameter space and are mapped to the free
//! parameters with the [`FreeTransform`] before inversion.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Dataset, Evidence, Observation, ObservationPattern, Structure};
use crate::posterior::FreeTransform;
use crate::spn::{Scratch, Spn};

/// Weight applied to each completion's outer product in the Fisher information.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FisherWeighting {
    /// `1 / p(e')`, the expected-information identity.
    #[default]
    Inverse,
    /// `1 / p²(e')`.
    InverseSquared,
}

impl FisherWeighting {
    pub fn from_exponent(exponent: u8) -> Result<Self> {
        match exponent {
            1 => Ok(FisherWeighting::Inverse),
            2 => Ok(FisherWeighting::InverseSquared),
            other => Err(Error::Argument(format!("fisher weighting must be 1 or 2, got {other}"))),
        }
    }

    fn weight(self, p: f64) -> f64 {
        match self {
            FisherWeighting::Inverse => 1.0 / p,
            FisherWeighting::InverseSquared => 1.0 / (p * p),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    /// Dirichlet prior shapes in parameter layout; `None` is the flat prior.
    pub prior: Option<Vec<f64>>,
    pub max_iterations: usize,
    /// Convergence threshold on the change of the observed-data log-posterior.
    pub tolerance: f64,
    /// Lower bound on every estimated parameter.
    pub clamp: f64,
    pub fisher_weighting: FisherWeighting,
    /// Seed of the initialization jitter.
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            prior: None,
            max_iterations: 200,
            tolerance: 1e-8,
            clamp: 1e-6,
            fisher_weighting: FisherWeighting::Inverse,
            seed: 0,
        }
    }
}

impl EmConfig {
    pub fn validate(&self, structure: &Structure) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::Argument("EM tolerance must be positive".into()));
        }
        if !(self.clamp > 0.0 && self.clamp < 1e-2) {
            return Err(Error::Argument(format!("clamp {} outside (0, 0.01)", self.clamp)));
        }
        if let Some(prior) = &self.prior {
            if prior.len() != structure.num_params() || prior.iter().any(|&a| !(a > 0.0)) {
                return Err(Error::Argument("prior shapes must be positive, one per parameter".into()));
            }
        }
        Ok(())
    }

    fn prior_shape(&self, j: usize) -> f64 {
        self.prior.as_ref().map_or(1.0, |p| p[j])
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EmTrace {
    /// Observed-data log-posterior (up to a constant) at every visited estimate.
    pub log_posterior: Vec<f64>,
    /// Number of M-steps taken.
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Clone, Debug)]
pub struct EmFit {
    pub theta: Vec<f64>,
    pub trace: EmTrace,
    pub skipped: usize,
}

/// `p(x_i, pa_i | e)` for every parameter position, from one circuit pass. Each family of a
/// node sums, over the node's families, to one.
pub fn expected_counts(
    spn: &Spn,
    theta: &[f64],
    row: &Evidence,
    scratch: &mut Scratch,
) -> Result<Vec<f64>> {
    let pass = spn.backward(theta, row, scratch);
    if !(pass.value > 0.0) {
        return Err(Error::ZeroSupport);
    }
    Ok(theta.iter().zip(&pass.gradient).map(|(t, g)| t * g / pass.value).collect())
}

/// Maximizes `Σ w_x log θ_x` over the simplex with every `θ_x >= floor`. Entries whose
/// unconstrained optimum falls below the floor are pinned to it and the rest share the
/// remaining mass in proportion to their weights.
pub fn constrained_family_max(weights: &[f64], floor: f64) -> Vec<f64> {
    let k = weights.len();
    let w: Vec<f64> = weights.iter().map(|&w| w.max(0.0)).collect();
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return vec![1.0 / k as f64; k];
    }
    let mut pinned = vec![false; k];
    loop {
        let free_mass: f64 = w.iter().zip(&pinned).filter(|(_, &p)| !p).map(|(w, _)| w).sum();
        let n_pinned = pinned.iter().filter(|&&p| p).count();
        let scale = free_mass / (1.0 - n_pinned as f64 * floor);
        let mut changed = false;
        for x in 0..k {
            if !pinned[x] && w[x] / scale < floor {
                pinned[x] = true;
                changed = true;
            }
        }
        if !changed {
            return (0..k).map(|x| if pinned[x] { floor } else { w[x] / scale }).collect();
        }
    }
}

fn log_prior(cfg: &EmConfig, theta: &[f64]) -> f64 {
    match &cfg.prior {
        None => 0.0,
        Some(prior) => prior.iter().zip(theta).map(|(a, t)| (a - 1.0) * t.ln()).sum(),
    }
}

/// Uniform rows with a 1% multiplicative jitter.
pub fn jittered_uniform(structure: &Structure, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = vec![0.0; structure.num_params()];
    for fam in structure.layout().families() {
        let row = &mut theta[fam.range()];
        row.iter_mut().for_each(|t| *t = 1.0 + 0.01 * (2.0 * rng.random::<f64>() - 1.0));
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|t| *t /= s);
    }
    theta
}

pub fn fit(spn: &Spn, structure: &Structure, data: &Dataset, cfg: &EmConfig) -> Result<EmFit> {
    fit_from(spn, structure, data, cfg, jittered_uniform(structure, cfg.seed))
}

/// EM from a given starting point.
pub fn fit_from(
    spn: &Spn,
    structure: &Structure,
    data: &Dataset,
    cfg: &EmConfig,
    init: Vec<f64>,
) -> Result<EmFit> {
    cfg.validate(structure)?;
    let layout = structure.layout();
    let rows = data.grouped();
    let mut scratch = Scratch::default();
    let mut theta = init;
    let mut trace = EmTrace::default();
    let mut skipped;
    let mut weights = Vec::new();
    loop {
        // E-step
        let mut counts = vec![0.0; layout.len()];
        let mut loglik = 0.0;
        skipped = 0;
        for (row, mult) in &rows {
            let pass = spn.backward(&theta, row, &mut scratch);
            if !(pass.value > 0.0) {
                skipped += mult;
                continue;
            }
            let m = *mult as f64;
            loglik += m * pass.value.ln();
            for (j, c) in counts.iter_mut().enumerate() {
                *c += m * theta[j] * pass.gradient[j] / pass.value;
            }
        }
        if !rows.is_empty() && skipped == rows.iter().map(|r| r.1).sum::<usize>() {
            return Err(Error::Learner("every row has zero probability under the estimate".into()));
        }
        let lp = loglik + log_prior(cfg, &theta);
        if let Some(&prev) = trace.log_posterior.last() {
            if (lp - prev).abs() < cfg.tolerance {
                trace.log_posterior.push(lp);
                trace.converged = true;
                break;
            }
        }
        trace.log_posterior.push(lp);
        if trace.iterations == cfg.max_iterations {
            break;
        }
        // M-step
        for fam in layout.families() {
            weights.clear();
            weights.extend(fam.range().map(|j| counts[j] + cfg.prior_shape(j) - 1.0));
            let row = constrained_family_max(&weights, cfg.clamp);
            theta[fam.range()].copy_from_slice(&row);
        }
        trace.iterations += 1;
    }
    Ok(EmFit { theta, trace, skipped })
}

/// Observed-data log-posterior (up to a constant); zero-support rows are ignored.
pub fn log_posterior(spn: &Spn, theta: &[f64], data: &Dataset, cfg: &EmConfig) -> f64 {
    let mut scratch = Scratch::default();
    let loglik: f64 = data
        .grouped()
        .iter()
        .filter_map(|(row, m)| {
            let p = spn.forward(theta, row, &mut scratch);
            (p > 0.0).then(|| *m as f64 * p.ln())
        })
        .sum();
    loglik + log_prior(cfg, theta)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InfoKind {
    Hessian,
    Fisher,
}

/// An information matrix over all parameters, with its prior-like diagonal part kept apart.
#[derive(Clone, Debug, PartialEq)]
pub struct InfoMatrix {
    pub kind: InfoKind,
    pub matrix: DMatrix<f64>,
    /// Diagonal of `J₀ = K diag(1/θ)`, `K` holding child cardinalities.
    pub j0: Vec<f64>,
}

#[derive(Serialize)]
struct InfoDump<'a> {
    kind: InfoKind,
    j0: &'a [f64],
    matrix: Vec<Vec<f64>>,
}

impl InfoMatrix {
    fn base(kind: InfoKind, structure: &Structure, theta: &[f64]) -> Self {
        let j0: Vec<f64> = structure
            .child_cardinalities()
            .iter()
            .zip(theta)
            .map(|(k, t)| k / t)
            .collect();
        let matrix = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&j0));
        Self { kind, matrix, j0 }
    }

    /// Adds `w g gᵀ`, touching only the nonzero entries of `g`.
    fn add_outer(&mut self, g: &[f64], w: f64, support: &mut Vec<usize>) {
        support.clear();
        support.extend(g.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(j, _)| j));
        for &a in support.iter() {
            let wa = w * g[a];
            for &b in support.iter() {
                self.matrix[(a, b)] += wa * g[b];
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let matrix = self.matrix.row_iter().map(|r| r.iter().copied().collect()).collect();
        Ok(serde_json::to_string_pretty(&InfoDump { kind: self.kind, j0: &self.j0, matrix })?)
    }
}

/// `H ≈ J₀ + Σ_t ∇p(e_t)∇ᵀp(e_t) / p²(e_t)`, one circuit pass per distinct row.
pub fn hessian_ga(
    spn: &Spn,
    structure: &Structure,
    theta: &[f64],
    data: &Dataset,
) -> InfoMatrix {
    let mut info = InfoMatrix::base(InfoKind::Hessian, structure, theta);
    let mut scratch = Scratch::default();
    let mut support = Vec::new();
    for (row, mult) in data.grouped() {
        let pass = spn.backward(theta, &row, &mut scratch);
        if !(pass.value > 0.0) {
            continue;
        }
        info.add_outer(&pass.gradient, mult as f64 / (pass.value * pass.value), &mut support);
    }
    info
}

/// `J = J₀ + Σ_t Σ_{e' ∈ E_t} w(e') ∇p(e')∇ᵀp(e')`, where `E_t` enumerates every joint
/// value of the observed nodes of pattern `t`; latent nodes stay marginalized in `p(e')`.
pub fn fisher(
    spn: &Spn,
    structure: &Structure,
    theta: &[f64],
    patterns: &[(ObservationPattern, usize)],
    weighting: FisherWeighting,
) -> InfoMatrix {
    let mut info = InfoMatrix::base(InfoKind::Fisher, structure, theta);
    let mut scratch = Scratch::default();
    let mut support = Vec::new();
    for (pattern, mult) in patterns {
        let observed = &pattern.0;
        if observed.is_empty() {
            continue;
        }
        let mut evidence = Observation::empty(structure.len());
        observed.iter().for_each(|&i| evidence.0[i] = Some(0));
        'completions: loop {
            let pass = spn.backward(theta, &evidence, &mut scratch);
            if pass.value > 0.0 {
                let w = *mult as f64 * weighting.weight(pass.value);
                info.add_outer(&pass.gradient, w, &mut support);
            }
            // next completion in mixed radix, last observed node fastest
            for &i in observed.iter().rev() {
                let v = evidence.0[i].unwrap() + 1;
                if v < structure.cardinality(i) {
                    evidence.0[i] = Some(v);
                    continue 'completions;
                }
                evidence.0[i] = Some(0);
            }
            break;
        }
    }
    info
}

/// `R = Dᵀ (D M Dᵀ)⁻¹ D`. Falls back to a small ridge when the Cholesky factorization fails.
pub fn covariance_from_info(info: &InfoMatrix, d: &FreeTransform) -> Result<DMatrix<f64>> {
    let dm = &d.matrix;
    let mut a = dm * &info.matrix * dm.transpose();
    a = (&a + a.transpose()) * 0.5;
    let free = a.nrows();
    let chol = match a.clone().cholesky() {
        Some(c) => c,
        None => {
            let ridge = 1e-10 * a.trace() / free as f64;
            let mut ridged = a.clone();
            for i in 0..free {
                ridged[(i, i)] += ridge;
            }
            match ridged.cholesky() {
                Some(c) => c,
                None => {
                    let eig = a.symmetric_eigen().eigenvalues;
                    let max = eig.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                    let min = eig.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
                    return Err(Error::Singular { condition: max / min });
                }
            }
        }
    };
    let r = dm.transpose() * chol.inverse() * dm;
    Ok((&r + r.transpose()) * 0.5)
}

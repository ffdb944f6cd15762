//! Parameter posteriors and the interval machinery built on them.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::beta::{beta_reg, ln_beta};

use crate::error::{Error, Result};
use crate::network::{ParamLayout, Structure};

/// Concentration used when the requested variance is not attainable by any Beta.
pub const DIFFUSE_CONCENTRATION: f64 = 1e-6;

/// Beyond this concentration Beta quantiles come from the normal approximation; the
/// continued fraction behind the incomplete Beta needs O(sqrt(a+b)) terms.
const NORMAL_APPROX_CONCENTRATION: f64 = 1e4;

const QUANTILE_TOLERANCE: f64 = 1e-10;
const TAIL_CUTOFF: f64 = 1e-8;

/// Independent Dirichlet per family, shapes stored in the parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub struct DirichletProduct {
    pub alpha: Vec<f64>,
}

impl DirichletProduct {
    pub fn uniform(layout: &ParamLayout) -> Self {
        Self { alpha: vec![1.0; layout.len()] }
    }

    pub fn new(layout: &ParamLayout, alpha: Vec<f64>) -> Result<Self> {
        if alpha.len() != layout.len() {
            return Err(Error::Argument(format!(
                "expected {} shapes, got {}",
                layout.len(),
                alpha.len()
            )));
        }
        if let Some(a) = alpha.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
            return Err(Error::Argument(format!("Dirichlet shape {a} is not positive")));
        }
        Ok(Self { alpha })
    }

    /// Per-family strengths `S = Σ α`, in family order.
    pub fn strengths(&self, layout: &ParamLayout) -> Vec<f64> {
        layout.families().iter().map(|f| self.alpha[f.range()].iter().sum()).collect()
    }

    pub fn means(&self, layout: &ParamLayout) -> Vec<f64> {
        let mut m = self.alpha.clone();
        for f in layout.families() {
            let s: f64 = self.alpha[f.range()].iter().sum();
            m[f.range()].iter_mut().for_each(|v| *v /= s);
        }
        m
    }
}

/// Mean vector and constraint-respecting covariance over all parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPosterior {
    pub mean: Vec<f64>,
    pub covariance: DMatrix<f64>,
}

impl GaussianPosterior {
    pub fn point(mean: Vec<f64>) -> Self {
        let p = mean.len();
        Self { mean, covariance: DMatrix::zeros(p, p) }
    }

    pub fn variance(&self, j: usize) -> f64 {
        self.covariance[(j, j)]
    }

    /// `gᵀ R g`.
    pub fn quadratic_form(&self, g: &[f64]) -> f64 {
        let g = DVector::from_column_slice(g);
        (g.transpose() * &self.covariance * &g)[(0, 0)]
    }

    /// Symmetry, positive semidefiniteness, zero family row sums, normalized means.
    pub fn check(&self, layout: &ParamLayout) -> Result<()> {
        let p = layout.len();
        let r = &self.covariance;
        if self.mean.len() != p || r.nrows() != p || r.ncols() != p {
            return Err(Error::Argument("posterior shape does not match the network".into()));
        }
        let scale = r.diagonal().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        if (r - r.transpose()).amax() > 1e-10 * scale {
            return Err(Error::Argument("covariance is not symmetric".into()));
        }
        for f in layout.families() {
            let s: f64 = self.mean[f.range()].iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::Argument(format!("family mean sums to {s}")));
            }
            for row in 0..p {
                let s: f64 = f.range().map(|c| r[(row, c)]).sum();
                if s.abs() > 1e-9 * scale {
                    return Err(Error::Argument(format!("covariance family row sum {s}")));
                }
            }
        }
        let eig = r.clone().symmetric_eigen();
        if let Some(min) = eig.eigenvalues.iter().copied().reduce(f64::min) {
            if min < -1e-9 * scale {
                return Err(Error::Argument(format!("covariance eigenvalue {min} < 0")));
            }
        }
        Ok(())
    }
}

/// The `F × P` map from full-parameter gradients to free-parameter total derivatives. Each
/// family of size `k` contributes a `(k-1) × k` block `[I | -1]`; the last member of a family
/// is the dependent one.
#[derive(Clone, Debug, PartialEq)]
pub struct FreeTransform {
    pub matrix: DMatrix<f64>,
}

impl FreeTransform {
    pub fn new(structure: &Structure) -> Self {
        let layout = structure.layout();
        let free: usize = layout.families().iter().map(|f| f.len - 1).sum();
        let mut d = DMatrix::zeros(free, layout.len());
        let mut row = 0;
        for f in layout.families() {
            let last = f.offset + f.len - 1;
            for j in f.offset..last {
                d[(row, j)] = 1.0;
                d[(row, last)] = -1.0;
                row += 1;
            }
        }
        Self { matrix: d }
    }

    pub fn free_dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn apply(&self, g: &[f64]) -> Vec<f64> {
        (&self.matrix * DVector::from_column_slice(g)).as_slice().to_vec()
    }
}

/// Rising factorial `a (a+1) … (a+m-1)`.
fn rising(a: f64, m: u32) -> f64 {
    (0..m).map(|i| a + i as f64).product()
}

/// `E[∏ θ_j^{n_j}]` under `Dir(α)`, for total order at most three.
pub fn dirichlet_mixed_moment(alpha: &[f64], exponents: &[u32]) -> Result<f64> {
    if alpha.len() != exponents.len() {
        return Err(Error::Argument("shape and exponent lengths differ".into()));
    }
    if let Some(a) = alpha.iter().find(|&&a| a <= 0.0) {
        return Err(Error::Argument(format!("nonpositive Dirichlet shape {a}")));
    }
    let order: u32 = exponents.iter().sum();
    if order > 3 {
        return Err(Error::Argument(format!("moment of order {order} requested (max 3)")));
    }
    let s: f64 = alpha.iter().sum();
    let num: f64 = alpha.iter().zip(exponents).map(|(&a, &n)| rising(a, n)).product();
    Ok(num / rising(s, order))
}

/// Block-diagonal Gaussian with each family's Dirichlet mean and covariance.
pub fn to_gaussian(dp: &DirichletProduct, layout: &ParamLayout) -> GaussianPosterior {
    let mean = dp.means(layout);
    let p = layout.len();
    let mut cov = DMatrix::zeros(p, p);
    for f in layout.families() {
        let s: f64 = dp.alpha[f.range()].iter().sum();
        for a in f.range() {
            for b in f.range() {
                let delta = if a == b { 1.0 } else { 0.0 };
                cov[(a, b)] = mean[a] * (delta - mean[b]) / (s + 1.0);
            }
        }
    }
    GaussianPosterior { mean, covariance: cov }
}

/// How a scalar mean and variance turn into a confidence interval on [0, 1].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntervalMethod {
    /// Equal-tailed interval of the moment-matched Beta.
    #[default]
    Beta,
    /// Symmetric normal interval clipped to [0, 1].
    TruncatedGaussian,
}

fn check_moments(mean: f64, variance: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&mean) || !(variance >= 0.0) {
        return Err(Error::Argument(format!("invalid moments mean={mean} variance={variance}")));
    }
    Ok(())
}

/// Shapes `(a, b)` of the Beta with the given mean and variance, `None` for point masses.
pub fn matched_beta(mean: f64, variance: f64) -> Option<(f64, f64)> {
    if variance == 0.0 || mean == 0.0 || mean == 1.0 {
        return None;
    }
    let mut nu = mean * (1.0 - mean) / variance - 1.0;
    if !(nu > 0.0) {
        nu = DIFFUSE_CONCENTRATION;
    }
    Some((mean * nu, (1.0 - mean) * nu))
}

fn normal_approx(a: f64, b: f64) -> Normal {
    let nu = a + b;
    let m = a / nu;
    Normal::new(m, (m * (1.0 - m) / (nu + 1.0)).sqrt()).expect("positive spread")
}

/// Regularized incomplete Beta `I_x(a, b)`.
pub fn beta_cdf(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    if a + b > NORMAL_APPROX_CONCENTRATION {
        return normal_approx(a, b).cdf(x);
    }
    beta_reg(a, b, x)
}

/// Inverse of [`beta_cdf`] by safeguarded Newton iteration inside a shrinking bracket.
pub fn beta_quantile(a: f64, b: f64, p: f64) -> f64 {
    if p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return 1.0;
    }
    if a + b > NORMAL_APPROX_CONCENTRATION {
        return normal_approx(a, b).inverse_cdf(p).clamp(0.0, 1.0);
    }
    let ln_norm = ln_beta(a, b);
    // far tails: I_x(a, b) ≈ x^a / (a B(a, b)) for small x, with relative error O(x)
    let tail = |a: f64, p: f64| ((p.ln() + a.ln() + ln_norm) / a).exp();
    let lower = tail(a, p);
    if lower < TAIL_CUTOFF {
        return lower;
    }
    let upper = tail(b, 1.0 - p);
    if upper < TAIL_CUTOFF {
        return 1.0 - upper;
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let mut x = (a / (a + b)).clamp(1e-12, 1.0 - 1e-12);
    for _ in 0..300 {
        let f = beta_reg(a, b, x) - p;
        if f == 0.0 {
            return x;
        }
        if f < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let density = ((a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln() - ln_norm).exp();
        let newton = x - f / density;
        let next = if density.is_finite() && density > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        let scale = next.min(1.0 - next).max(TAIL_CUTOFF);
        if (next - x).abs() < 1e-2 * QUANTILE_TOLERANCE * scale || hi - lo < QUANTILE_TOLERANCE * scale {
            return next;
        }
        x = next;
    }
    x
}

impl IntervalMethod {
    /// Interval of confidence level `gamma` around a probability-valued quantity.
    pub fn interval(self, mean: f64, variance: f64, gamma: f64) -> Result<(f64, f64)> {
        check_moments(mean, variance)?;
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::Argument(format!("confidence level {gamma} outside [0, 1]")));
        }
        match self {
            IntervalMethod::Beta => {
                let Some((a, b)) = matched_beta(mean, variance) else {
                    return Ok((mean, mean));
                };
                if gamma == 1.0 {
                    return Ok((0.0, 1.0));
                }
                let lo = beta_quantile(a, b, 0.5 * (1.0 - gamma));
                let hi = beta_quantile(a, b, 0.5 * (1.0 + gamma));
                Ok((lo, hi))
            }
            IntervalMethod::TruncatedGaussian => {
                if variance == 0.0 {
                    return Ok((mean, mean));
                }
                if gamma == 1.0 {
                    return Ok((0.0, 1.0));
                }
                let z = standard_normal().inverse_cdf(0.5 * (1.0 + gamma));
                let half = z * variance.sqrt();
                Ok(((mean - half).max(0.0), (mean + half).min(1.0)))
            }
        }
    }

    /// The smallest confidence level whose interval contains `truth`. Because the intervals
    /// are nested, `truth` lies in `interval(γ)` exactly when `γ >= threshold`. Returns
    /// infinity when no level covers it (a point mass elsewhere).
    pub fn coverage_threshold(self, mean: f64, variance: f64, truth: f64) -> Result<f64> {
        check_moments(mean, variance)?;
        let point = |m: f64| if truth == m { 0.0 } else { f64::INFINITY };
        match self {
            IntervalMethod::Beta => match matched_beta(mean, variance) {
                None => Ok(point(mean)),
                Some((a, b)) => Ok((2.0 * beta_cdf(a, b, truth) - 1.0).abs().min(1.0)),
            },
            IntervalMethod::TruncatedGaussian => {
                if variance == 0.0 {
                    return Ok(point(mean));
                }
                let z = (truth - mean).abs() / variance.sqrt();
                Ok((2.0 * standard_normal().cdf(z) - 1.0).min(1.0))
            }
        }
    }
}

fn standard_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Equal-tailed interval of the moment-matched Beta.
pub fn beta_interval(mean: f64, variance: f64, gamma: f64) -> Result<(f64, f64)> {
    IntervalMethod::Beta.interval(mean, variance, gamma)
}

/// On-disk posterior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PosteriorFile {
    Dirichlet {
        families: Vec<Vec<f64>>,
    },
    Gaussian {
        mean: Vec<f64>,
        /// Row-major lower triangle including the diagonal.
        covariance_lower: Vec<f64>,
    },
}

impl PosteriorFile {
    pub fn from_dirichlet(dp: &DirichletProduct, layout: &ParamLayout) -> Self {
        PosteriorFile::Dirichlet {
            families: layout.families().iter().map(|f| dp.alpha[f.range()].to_vec()).collect(),
        }
    }

    pub fn from_gaussian(g: &GaussianPosterior) -> Self {
        let p = g.mean.len();
        let mut lower = Vec::with_capacity(p * (p + 1) / 2);
        for i in 0..p {
            for j in 0..=i {
                lower.push(g.covariance[(i, j)]);
            }
        }
        PosteriorFile::Gaussian { mean: g.mean.clone(), covariance_lower: lower }
    }

    /// The Gaussian form used for querying; Dirichlet posteriors are converted.
    pub fn to_gaussian(&self, layout: &ParamLayout) -> Result<GaussianPosterior> {
        match self {
            PosteriorFile::Dirichlet { families } => {
                if families.len() != layout.families().len() {
                    return Err(Error::Format("family count does not match the network".into()));
                }
                let alpha: Vec<f64> = families.iter().flatten().copied().collect();
                for (fam, shapes) in layout.families().iter().zip(families) {
                    if shapes.len() != fam.len {
                        return Err(Error::Format("family size does not match the network".into()));
                    }
                }
                let dp = DirichletProduct::new(layout, alpha)
                    .map_err(|e| Error::Format(e.to_string()))?;
                Ok(to_gaussian(&dp, layout))
            }
            PosteriorFile::Gaussian { mean, covariance_lower } => {
                let p = mean.len();
                if p != layout.len() || covariance_lower.len() != p * (p + 1) / 2 {
                    return Err(Error::Format("posterior size does not match the network".into()));
                }
                let mut cov = DMatrix::zeros(p, p);
                let mut k = 0;
                for i in 0..p {
                    for j in 0..=i {
                        cov[(i, j)] = covariance_lower[k];
                        cov[(j, i)] = covariance_lower[k];
                        k += 1;
                    }
                }
                Ok(GaussianPosterior { mean: mean.clone(), covariance: cov })
            }
        }
    }
}

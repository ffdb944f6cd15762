//! Uniform entry point over the three posterior learners.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bmm;
use crate::em::{self, EmConfig, EmTrace};
use crate::error::{Error, Result};
use crate::network::{Dataset, Structure};
use crate::posterior::{to_gaussian, DirichletProduct, FreeTransform, GaussianPosterior};
use crate::spn::Spn;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Learner {
    Bmm,
    EmGa,
    EmFisher,
}

impl Learner {
    pub const ALL: [Learner; 3] = [Learner::Bmm, Learner::EmGa, Learner::EmFisher];

    pub fn id(self) -> &'static str {
        match self {
            Learner::Bmm => "bmm",
            Learner::EmGa => "em-ga",
            Learner::EmFisher => "em-fisher",
        }
    }
}

impl fmt::Display for Learner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Learner {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Learner::ALL
            .into_iter()
            .find(|l| l.id() == s)
            .ok_or_else(|| Error::Argument(format!("unknown learner '{s}' (bmm, em-ga, em-fisher)")))
    }
}

#[derive(Clone, Debug)]
pub struct Learned {
    pub gaussian: GaussianPosterior,
    /// Set for BMM only.
    pub dirichlet: Option<DirichletProduct>,
    /// Set for the EM learners only.
    pub trace: Option<EmTrace>,
    pub skipped: usize,
}

pub fn learn(
    learner: Learner,
    structure: &Structure,
    spn: &Spn,
    data: &Dataset,
    cfg: &EmConfig,
) -> Result<Learned> {
    let layout = structure.layout();
    if learner == Learner::Bmm {
        let fit = bmm::fit(spn, structure, data);
        return Ok(Learned {
            gaussian: to_gaussian(&fit.posterior, layout),
            dirichlet: Some(fit.posterior),
            trace: None,
            skipped: fit.skipped,
        });
    }
    let fit = em::fit(spn, structure, data, cfg)?;
    let info = match learner {
        Learner::EmGa => em::hessian_ga(spn, structure, &fit.theta, data),
        _ => em::fisher(spn, structure, &fit.theta, &data.patterns(), cfg.fisher_weighting),
    };
    let covariance = em::covariance_from_info(&info, &FreeTransform::new(structure))?;
    Ok(Learned {
        gaussian: GaussianPosterior { mean: fit.theta, covariance },
        dirichlet: None,
        trace: Some(fit.trace),
        skipped: fit.skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{ancestral_sample, mask_cells, sample_ground_truth};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ids_round_trip() {
        for l in Learner::ALL {
            assert_eq!(l.id().parse::<Learner>().unwrap(), l);
            assert_eq!(serde_json::to_string(&l).unwrap(), format!("\"{}\"", l.id()));
        }
        assert!("em".parse::<Learner>().is_err());
    }

    #[test]
    fn every_learner_yields_a_valid_posterior() {
        let s = Structure::builtin("dag9").unwrap();
        let spn = Spn::compile_default(&s);
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let net = sample_ground_truth(&s, &mut rng);
        let data = mask_cells(&ancestral_sample(&net, 120, &mut rng), 0.5, &mut rng).unwrap();
        for l in Learner::ALL {
            let out = learn(l, &s, &spn, &data, &EmConfig::default()).unwrap();
            out.gaussian.check(s.layout()).unwrap();
            assert_eq!(out.dirichlet.is_some(), l == Learner::Bmm);
            assert_eq!(out.trace.is_some(), l != Learner::Bmm);
        }
    }
}

//! Second-order Bayesian networks: parameter posteriors learned from incomplete categorical
//! data, compiled-circuit inference, and calibration measurement of the resulting intervals.

// `!(x > 0.0)` is used deliberately so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bmm;
pub mod em;
pub mod error;
pub mod harness;
pub mod infer;
pub mod learner;
pub mod network;
pub mod posterior;
pub mod spn;

pub use error::{Error, Result};
pub use learner::{learn, Learned, Learner};
pub use network::{BayesNet, Dataset, Evidence, Observation, Structure};
pub use posterior::{DirichletProduct, GaussianPosterior, IntervalMethod};
pub use spn::Spn;

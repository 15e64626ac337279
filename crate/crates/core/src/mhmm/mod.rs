//! Anchored variational EM for mixed hidden Markov models.
//!
//! Each iteration anchors the state posterior of subject i at the previous
//! variational mean `ν_i`, runs a single forward–backward pass there, updates
//! `q_i(f_i) = N(ν_i, Ω_i)` and then the global parameters.

mod elbo;
mod estep;
mod fit;
mod init;
mod mstep;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use elbo::{anchored_elbo, elbo_from_posteriors, subject_elbo};
pub(crate) use elbo::chain_terms;
pub(crate) use estep::closed_form_factor;
pub use estep::{
    e_step_local, log_emissions_at, q_objective_quadrature, update_q, update_q_closed_form, update_q_laplace,
    update_q_quadrature,
};
pub use fit::{align_states, fit_mhmm, resolve_method};
pub(crate) use fit::{check_data, m_step};
pub use init::{init_bernoulli, init_gaussian, kmeans_farthest_point};
pub use mstep::{m_step_gamma, m_step_pi, m_step_sigma, GammaUpdate};

use crate::emission::EmissionModel;
use crate::error::{AvemError, Result};
use crate::hmm::ChainParams;
use crate::linalg::cholesky;
use crate::par::Parallelism;
use crate::factor::QFactor;
use crate::report::FitReport;

/// Global MHMM parameters `θ = (π, Γ, θₑ, Σ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MhmmParams<E> {
    pub chain: ChainParams,
    pub emission: E,
    /// Random-effect covariance, `d × d`.
    pub sigma: DMatrix<f64>,
}

impl<E: EmissionModel> MhmmParams<E> {
    pub fn new(chain: ChainParams, emission: E, sigma: DMatrix<f64>) -> Result<Self> {
        let p = Self { chain, emission, sigma };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.chain.validate()?;
        if self.emission.n_states() != self.chain.n_states() {
            return Err(AvemError::DimensionMismatch {
                what: "emission states",
                expected: self.chain.n_states(),
                found: self.emission.n_states(),
            });
        }
        let d = self.emission.effect_dim();
        if self.sigma.nrows() != d || self.sigma.ncols() != d {
            return Err(AvemError::DimensionMismatch { what: "random-effect covariance", expected: d, found: self.sigma.nrows() });
        }
        cholesky(&self.sigma, "random-effect covariance")?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EStepMethod {
    ClosedForm,
    Laplace,
    Quadrature,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AvemConfig {
    pub max_iter: usize,
    /// Relative change of the anchored ELBO below which the loop stops.
    pub rel_tol: f64,
    /// `None` picks closed form when available, else Laplace.
    pub e_step_method: Option<EStepMethod>,
    /// Gauss–Hermite nodes per dimension.
    pub n_quad: usize,
    pub seed: u64,
    pub parallelism: Parallelism,
    /// Keep `Σ` at its initial value.
    pub sigma_fixed: bool,
}

impl Default for AvemConfig {
    fn default() -> Self {
        Self {
            max_iter: 500,
            rel_tol: 1e-6,
            e_step_method: None,
            n_quad: 9,
            seed: 0,
            parallelism: Parallelism::default(),
            sigma_fixed: false,
        }
    }
}

impl AvemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(AvemError::InvalidParameter("max_iter must be positive".into()));
        }
        if !(self.rel_tol > 0.0) {
            return Err(AvemError::InvalidParameter("rel_tol must be positive".into()));
        }
        if self.n_quad == 0 {
            return Err(AvemError::InvalidParameter("n_quad must be at least 1".into()));
        }
        Ok(())
    }
}

pub type MhmmFit<E> = FitReport<MhmmParams<E>, QFactor>;

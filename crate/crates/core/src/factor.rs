use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::linalg::{cholesky, gaussian_kl, spd_inverse, spd_logdet};

/// Gaussian variational factor `N(ν, Ω)` over a subject random effect.
#[derive(Debug, Clone, PartialEq)]
pub struct QFactor {
    pub nu: DVector<f64>,
    pub omega: DMatrix<f64>,
}

impl QFactor {
    pub fn new(nu: DVector<f64>, omega: DMatrix<f64>) -> Result<Self> {
        cholesky(&omega, "variational covariance")?;
        Ok(Self { nu, omega })
    }

    /// Zero-mean factor equal to the prior `N(0, Σ)`.
    pub fn prior(sigma: &DMatrix<f64>) -> Self {
        Self { nu: DVector::zeros(sigma.nrows()), omega: sigma.clone() }
    }

    pub fn dim(&self) -> usize {
        self.nu.len()
    }

    /// `E[f fᵀ] = Ω + ν νᵀ`.
    pub fn second_moment(&self) -> DMatrix<f64> {
        &self.omega + &self.nu * self.nu.transpose()
    }

    /// `KL(q ‖ N(mean, cov))`.
    pub fn kl_to(&self, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
        let inv = spd_inverse(cov, "prior covariance")?;
        let ld = spd_logdet(cov, "prior covariance")?;
        gaussian_kl(&self.nu, &self.omega, mean, &inv, ld)
    }
}

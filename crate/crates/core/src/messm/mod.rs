//! Anchored variational EM for mixed-effects linear Gaussian state-space
//! models with subject-specific transition `G_i` and lower-triangular
//! loading `H_i`.
//!
//! `g_i = vec(G_i)` stacks columns; `h_i = vecl(H_i)` stacks the free
//! lower-triangular entries column by column (rows `c..p` of column `c`).

mod align;
mod elbo;
mod fit;
mod mstep;
mod reduced;
mod update;

use nalgebra::{DMatrix, DVector};

pub use align::{flip_effects, flip_params, flip_state_coordinates, sign_align, AlignOutcome};
pub use elbo::{chain_entropy, expected_complete_loglik, subject_elbo};
pub use fit::{fit_messm, init_messm, MessmConfig, MessmFit};
pub use mstep::m_step_messm;
pub use reduced::{fit_reduced_lgssm, pca_start, ReducedFit};
pub use update::{anchored_smoother, update_q_g, update_q_h};

use crate::error::{AvemError, Result};
use crate::factor::QFactor;
use crate::kalman::LgssmSpec;
use crate::linalg::cholesky;

/// Number of free entries of a `p × q` lower-trapezoidal matrix.
pub fn vecl_len(p: usize, q: usize) -> usize {
    p * q - q * (q - 1) / 2
}

/// `pq × L_h` 0/1 matrix with `vec(H) = S_H vecl(H)`.
pub fn build_s_h(p: usize, q: usize) -> Result<DMatrix<f64>> {
    if q == 0 || p < q {
        return Err(AvemError::InvalidParameter(format!("loading must be lower-trapezoidal, got p={p}, q={q}")));
    }
    let mut s = DMatrix::zeros(p * q, vecl_len(p, q));
    let mut col = 0;
    for c in 0..q {
        for r in c..p {
            s[(c * p + r, col)] = 1.0;
            col += 1;
        }
    }
    Ok(s)
}

/// Free lower-triangular entries of `h`, column by column.
pub fn vecl(h: &DMatrix<f64>) -> DVector<f64> {
    let (p, q) = h.shape();
    let mut out = Vec::with_capacity(vecl_len(p, q));
    for c in 0..q {
        for r in c..p {
            out.push(h[(r, c)]);
        }
    }
    DVector::from_vec(out)
}

pub fn unvecl(v: &DVector<f64>, p: usize, q: usize) -> DMatrix<f64> {
    let mut h = DMatrix::zeros(p, q);
    let mut i = 0;
    for c in 0..q {
        for r in c..p {
            h[(r, c)] = v[i];
            i += 1;
        }
    }
    h
}

/// Position of `H[r, c]` inside `vecl(H)`, if it is a free entry.
pub fn vecl_index(p: usize, r: usize, c: usize) -> Option<usize> {
    (r >= c && r < p).then(|| (0..c).map(|cc| p - cc).sum::<usize>() + (r - c))
}

/// Global MESSM parameters; the state noise is fixed to the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct MessmParams {
    pub m0: DVector<f64>,
    pub p0: DMatrix<f64>,
    /// Diagonal of `R`.
    pub r: DVector<f64>,
    pub mu_g: DVector<f64>,
    pub sigma_g: DMatrix<f64>,
    pub mu_h: DVector<f64>,
    pub sigma_h: DMatrix<f64>,
}

impl MessmParams {
    pub fn state_dim(&self) -> usize {
        self.m0.len()
    }

    pub fn obs_dim(&self) -> usize {
        self.r.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (p, q) = (self.obs_dim(), self.state_dim());
        if p < q || q == 0 {
            return Err(AvemError::InvalidParameter(format!("need p >= q >= 1, got p={p}, q={q}")));
        }
        let lh = vecl_len(p, q);
        let checks = [
            ("P0", self.p0.nrows(), q),
            ("mu_g", self.mu_g.len(), q * q),
            ("Sigma_g", self.sigma_g.nrows(), q * q),
            ("mu_h", self.mu_h.len(), lh),
            ("Sigma_h", self.sigma_h.nrows(), lh),
        ];
        for (what, found, expected) in checks {
            if found != expected {
                return Err(AvemError::InvalidParameter(format!("{what}: expected size {expected}, found {found}")));
            }
        }
        if self.r.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(AvemError::InvalidParameter("observation variances must be positive".into()));
        }
        cholesky(&self.p0, "P0")?;
        cholesky(&self.sigma_g, "Sigma_g")?;
        cholesky(&self.sigma_h, "Sigma_h")?;
        Ok(())
    }

    /// Population-mean transition matrix `unvec(μ_g)`.
    pub fn g_mean(&self) -> DMatrix<f64> {
        let q = self.state_dim();
        DMatrix::from_column_slice(q, q, self.mu_g.as_slice())
    }

    pub fn h_mean(&self) -> DMatrix<f64> {
        unvecl(&self.mu_h, self.obs_dim(), self.state_dim())
    }

    /// Linear-Gaussian model with the effects pinned at `(g, h)`.
    pub fn spec_at(&self, g: &DVector<f64>, h: &DVector<f64>) -> LgssmSpec {
        let q = self.state_dim();
        LgssmSpec {
            g: DMatrix::from_column_slice(q, q, g.as_slice()),
            h: unvecl(h, self.obs_dim(), q),
            r: self.r.clone(),
            m0: self.m0.clone(),
            p0: self.p0.clone(),
        }
    }
}

/// Per-subject variational factors and the anchors they were built from.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectEffects {
    pub q_g: QFactor,
    pub q_h: QFactor,
    pub g0: DVector<f64>,
    pub h0: DVector<f64>,
}

impl SubjectEffects {
    pub fn from_prior(params: &MessmParams) -> Self {
        Self {
            q_g: QFactor { nu: params.mu_g.clone(), omega: params.sigma_g.clone() },
            q_h: QFactor { nu: params.mu_h.clone(), omega: params.sigma_h.clone() },
            g0: params.mu_g.clone(),
            h0: params.mu_h.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expansion_matrix_shapes() {
        assert_eq!(build_s_h(1, 1).unwrap(), DMatrix::from_element(1, 1, 1.0));
        let s = build_s_h(2, 2).unwrap();
        assert_eq!(s.shape(), (4, 3));
        assert_eq!(s.transpose() * &s, DMatrix::identity(3, 3));
        // (1,1), (2,1), (2,2) in one-based positions of vec(H)
        assert_eq!(s[(0, 0)], 1.0);
        assert_eq!(s[(1, 1)], 1.0);
        assert_eq!(s[(3, 2)], 1.0);
        assert_eq!(vecl_len(4, 2), 7);
        assert!(build_s_h(1, 2).is_err());
    }

    #[test]
    fn vecl_positions() {
        let p = 4;
        let mut i = 0;
        for c in 0..2 {
            for r in c..p {
                assert_eq!(vecl_index(p, r, c), Some(i));
                i += 1;
            }
        }
        assert_eq!(vecl_index(p, 0, 1), None);
    }
}

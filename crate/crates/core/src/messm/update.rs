use nalgebra::{DMatrix, DVector};

use super::MessmParams;
use crate::data::Sequence;
use crate::error::{AvemError, Result};
use crate::factor::QFactor;
use crate::kalman::{smooth, SmootherMoments};
use crate::linalg::{cholesky, spd_inverse, symmetrized};

/// One Kalman filter + RTS smoother pass with `G = unvec(g0)`,
/// `H = unvecl(h0)`.
pub fn anchored_smoother(params: &MessmParams, seq: &Sequence, g0: &DVector<f64>, h0: &DVector<f64>) -> Result<SmootherMoments> {
    if seq.obs_dim() != params.obs_dim() {
        return Err(AvemError::DimensionMismatch { what: "MESSM observation dimension", expected: params.obs_dim(), found: seq.obs_dim() });
    }
    smooth(&params.spec_at(g0, h0), &seq.to_matrix())
}

/// `N(Λ⁻¹η, Λ⁻¹)` after checking that `Λ` is symmetric positive definite.
fn gaussian_from_natural(lambda: DMatrix<f64>, eta: &DVector<f64>, what: &str) -> Result<QFactor> {
    let asym = (&lambda - lambda.transpose()).amax();
    if asym > 1e-8 * (1.0 + lambda.amax()) {
        return Err(AvemError::NotPositiveDefinite(format!("{what} is not symmetric")));
    }
    let lambda = symmetrized(lambda);
    let chol = cholesky(&lambda, what)?;
    let nu = chol.solve(eta);
    let omega = symmetrized(chol.inverse());
    Ok(QFactor { nu, omega })
}

/// `Λ_g = Σ_g⁻¹ + Σ_{t≥2} Q̂_{t−1} ⊗ I_q`, `η_g = Σ_g⁻¹μ_g + Σ_{t≥2} vec(Q̂_{t,t−1})`.
pub fn update_q_g(params: &MessmParams, moments: &SmootherMoments) -> Result<QFactor> {
    let q = params.state_dim();
    let sg_inv = spd_inverse(&params.sigma_g, "Sigma_g")?;
    let mut sum_prev = DMatrix::zeros(q, q);
    let mut sum_lag = DMatrix::zeros(q, q);
    for t in 1..moments.len() {
        sum_prev += &moments.q_hat[t - 1];
        sum_lag += &moments.q_lag[t - 1];
    }
    let lambda = &sg_inv + sum_prev.kronecker(&DMatrix::identity(q, q));
    let eta = &sg_inv * &params.mu_g + DVector::from_column_slice(sum_lag.as_slice());
    gaussian_from_natural(lambda, &eta, "Lambda_g")
}

/// `Λ_h = Σ_h⁻¹ + S_Hᵀ (Σ_t Q̂_t ⊗ R⁻¹) S_H`,
/// `η_h = Σ_h⁻¹μ_h + S_Hᵀ Σ_t m̂_t ⊗ (R⁻¹ D_t)`.
pub fn update_q_h(params: &MessmParams, moments: &SmootherMoments, seq: &Sequence, s_h: &DMatrix<f64>) -> Result<QFactor> {
    let (p, q) = (params.obs_dim(), params.state_dim());
    let sh_inv = spd_inverse(&params.sigma_h, "Sigma_h")?;
    let r_inv = DMatrix::from_diagonal(&params.r.map(|r| 1.0 / r));
    let mut sum_q = DMatrix::zeros(q, q);
    // Σ_t R⁻¹ D_t m̂_tᵀ, whose vec is Σ_t m̂_t ⊗ (R⁻¹ D_t)
    let mut cross = DMatrix::zeros(p, q);
    for t in 0..moments.len() {
        sum_q += &moments.q_hat[t];
        let y = DVector::from_column_slice(seq.row(t));
        cross += (&r_inv * y) * moments.m_hat[t].transpose();
    }
    let lambda = &sh_inv + s_h.transpose() * sum_q.kronecker(&r_inv) * s_h;
    let eta = &sh_inv * &params.mu_h + s_h.transpose() * DVector::from_column_slice(cross.as_slice());
    gaussian_from_natural(lambda, &eta, "Lambda_h")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::messm::build_s_h;

    fn scalar_params(mu_h: f64) -> MessmParams {
        MessmParams {
            m0: DVector::zeros(1),
            p0: DMatrix::identity(1, 1),
            r: DVector::from_element(1, 1.0),
            mu_g: DVector::zeros(1),
            sigma_g: DMatrix::identity(1, 1),
            mu_h: DVector::from_element(1, mu_h),
            sigma_h: DMatrix::identity(1, 1),
        }
    }

    fn scalar_moments(m: &[f64], q: &[f64], qlag: &[f64]) -> SmootherMoments {
        let s = |v: f64| DMatrix::from_element(1, 1, v);
        SmootherMoments {
            m_hat: m.iter().map(|&v| DVector::from_element(1, v)).collect(),
            p_hat: q.iter().zip(m).map(|(a, b)| s(a - b * b)).collect(),
            p_lag: vec![],
            q_hat: q.iter().map(|&v| s(v)).collect(),
            q_lag: qlag.iter().map(|&v| s(v)).collect(),
            log_likelihood: 0.0,
        }
    }

    #[test]
    fn scalar_g_update() {
        let q = update_q_g(&scalar_params(0.0), &scalar_moments(&[1.0, 1.0], &[2.0, 2.0], &[1.0])).unwrap();
        assert!((q.omega[(0, 0)] - 1.0 / 3.0).abs() < 1e-15);
        assert!((q.nu[0] - 1.0 / 3.0).abs() < 1e-15);
        let prior = update_q_g(&scalar_params(0.0), &scalar_moments(&[1.0], &[2.0], &[])).unwrap();
        assert_eq!(prior.nu[0], 0.0);
        assert_eq!(prior.omega[(0, 0)], 1.0);
    }

    #[test]
    fn scalar_h_update() {
        let seq = Sequence::new(1, vec![2.0, 2.0]).unwrap();
        let s_h = build_s_h(1, 1).unwrap();
        let q = update_q_h(&scalar_params(1.0), &scalar_moments(&[1.0, 1.0], &[1.0, 1.0], &[0.5]), &seq, &s_h).unwrap();
        assert!((q.omega[(0, 0)] - 1.0 / 3.0).abs() < 1e-15);
        assert!((q.nu[0] - 5.0 / 3.0).abs() < 1e-15);
    }
}

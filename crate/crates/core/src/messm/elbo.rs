use nalgebra::{DMatrix, DVector};

use super::mstep::{expected_obs_sq, obs_stats};
use super::{MessmParams, SubjectEffects};
use crate::data::Sequence;
use crate::error::{AvemError, Result};
use crate::factor::QFactor;
use crate::kalman::SmootherMoments;
use crate::linalg::{cholesky, spd_inverse, spd_logdet, symmetrized};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Entropy of the Gaussian smoothing posterior of `U_{1:T}` via its Markov
/// factorization: `P̂_1` and `Cov(U_t | U_{t−1}, D) = P̂_t − P̂_{t,t−1} P̂_{t−1}⁻¹ P̂_{t,t−1}ᵀ`.
pub fn chain_entropy(moments: &SmootherMoments) -> Result<f64> {
    let q = moments.m_hat[0].len() as f64;
    let per_step = 0.5 * q * (1.0 + LN_2PI);
    let mut h = per_step + 0.5 * spd_logdet(&moments.p_hat[0], "smoothed covariance")?;
    for t in 1..moments.len() {
        let chol = cholesky(&moments.p_hat[t - 1], "smoothed covariance")?;
        let lag = &moments.p_lag[t - 1];
        let cond = symmetrized(&moments.p_hat[t] - lag * chol.solve(&lag.transpose()));
        h += per_step + 0.5 * spd_logdet(&cond, "conditional smoothed covariance")?;
    }
    Ok(h)
}

/// `E[log p(D, U | g, h; θ)]` under the smoother moments and the Gaussian
/// factors `(ν_g, Ω_g)`, `(ν_h, Ω_h)`. `Ω` may be singular.
pub fn expected_complete_loglik(
    params: &MessmParams,
    seq: &Sequence,
    moments: &SmootherMoments,
    q_g: &QFactor,
    q_h: &QFactor,
    s_h: &DMatrix<f64>,
) -> Result<f64> {
    let (p, q) = (params.obs_dim(), params.state_dim());
    let t_len = moments.len();
    if seq.len() != t_len {
        return Err(AvemError::DimensionMismatch { what: "smoother length", expected: seq.len(), found: t_len });
    }
    // initial state
    let p0_inv = spd_inverse(&params.p0, "P0")?;
    let m1 = &moments.m_hat[0];
    let m0 = &params.m0;
    let e_init = &moments.q_hat[0] - m1 * m0.transpose() - m0 * m1.transpose() + m0 * m0.transpose();
    let mut ll = -0.5 * (q as f64 * LN_2PI + spd_logdet(&params.p0, "P0")? + (&p0_inv * e_init).trace());

    // transitions
    if t_len > 1 {
        let mut sum_prev = DMatrix::zeros(q, q);
        let mut sum_cur = 0.0;
        let mut sum_lag = DMatrix::zeros(q, q);
        for t in 1..t_len {
            sum_prev += &moments.q_hat[t - 1];
            sum_cur += moments.q_hat[t].trace();
            sum_lag += &moments.q_lag[t - 1];
        }
        let mg = &q_g.omega + &q_g.nu * q_g.nu.transpose();
        let quad = (sum_prev.kronecker(&DMatrix::identity(q, q)) * mg).trace();
        let lin = q_g.nu.dot(&DVector::from_column_slice(sum_lag.as_slice()));
        ll += -0.5 * ((t_len - 1) as f64 * q as f64 * LN_2PI + sum_cur - 2.0 * lin + quad);
    }

    // observations
    let stats = obs_stats(seq, moments);
    let sq = expected_obs_sq(&stats, &q_h.nu, &q_h.omega, s_h, p, q);
    for j in 0..p {
        let r = params.r[j];
        ll += -0.5 * (t_len as f64 * (LN_2PI + r.ln()) + sq[j] / r);
    }
    Ok(ll)
}

/// Anchored ELBO of one subject.
pub fn subject_elbo(
    params: &MessmParams,
    seq: &Sequence,
    moments: &SmootherMoments,
    effects: &SubjectEffects,
    s_h: &DMatrix<f64>,
) -> Result<f64> {
    let ec = expected_complete_loglik(params, seq, moments, &effects.q_g, &effects.q_h, s_h)?;
    let kl_g = effects.q_g.kl_to(&params.mu_g, &params.sigma_g)?;
    let kl_h = effects.q_h.kl_to(&params.mu_h, &params.sigma_h)?;
    Ok(ec + chain_entropy(moments)? - kl_g - kl_h)
}

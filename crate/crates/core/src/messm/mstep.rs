use nalgebra::{DMatrix, DVector};

use super::{MessmParams, SubjectEffects};
use crate::data::Sequence;
use crate::kalman::SmootherMoments;
use crate::linalg::symmetrized;

/// Mean and centered second moment of Gaussian factors.
fn pooled<'a>(items: impl Iterator<Item = (&'a DVector<f64>, &'a DMatrix<f64>)> + Clone, n: f64) -> (DVector<f64>, DMatrix<f64>) {
    let mut mean: Option<DVector<f64>> = None;
    for (nu, _) in items.clone() {
        mean = Some(match mean {
            Some(m) => m + nu,
            None => nu.clone(),
        });
    }
    let mean = mean.expect("at least one subject") / n;
    let mut cov = DMatrix::zeros(mean.len(), mean.len());
    for (nu, omega) in items {
        let c = nu - &mean;
        cov += omega + &c * c.transpose();
    }
    (mean, symmetrized(cov / n))
}

/// Per-row second moment `E[H_{j·}ᵀ H_{j·}]` blocks from `E[vec(H) vec(H)ᵀ]`.
pub(crate) fn row_second_moment(vec_h_moment: &DMatrix<f64>, p: usize, q: usize, j: usize) -> DMatrix<f64> {
    DMatrix::from_fn(q, q, |a, b| vec_h_moment[(a * p + j, b * p + j)])
}

/// Sufficient statistics of one subject for the observation block:
/// `Σ_t D_t²` per coordinate, `Σ_t D_{tj} m̂_t` per row, `Σ_t Q̂_t`.
pub(crate) struct ObsStats {
    pub sum_d2: DVector<f64>,
    /// `p × q`, row j is `Σ_t D_{tj} m̂_tᵀ`.
    pub cross: DMatrix<f64>,
    pub sum_q: DMatrix<f64>,
}

pub(crate) fn obs_stats(seq: &Sequence, moments: &SmootherMoments) -> ObsStats {
    let (p, q) = (seq.obs_dim(), moments.m_hat[0].len());
    let mut sum_d2 = DVector::zeros(p);
    let mut cross = DMatrix::zeros(p, q);
    let mut sum_q = DMatrix::zeros(q, q);
    for t in 0..seq.len() {
        let y = seq.row(t);
        for j in 0..p {
            sum_d2[j] += y[j] * y[j];
            for c in 0..q {
                cross[(j, c)] += y[j] * moments.m_hat[t][c];
            }
        }
        sum_q += &moments.q_hat[t];
    }
    ObsStats { sum_d2, cross, sum_q }
}

/// `Σ_t E[(D_{tj} − H_{j·} U_t)²]` for each j under `q_h` and the smoother.
pub(crate) fn expected_obs_sq(stats: &ObsStats, q_h_nu: &DVector<f64>, q_h_omega: &DMatrix<f64>, s_h: &DMatrix<f64>, p: usize, q: usize) -> DVector<f64> {
    let hbar = s_h * q_h_nu;
    let vh = s_h * (q_h_omega + q_h_nu * q_h_nu.transpose()) * s_h.transpose();
    DVector::from_fn(p, |j, _| {
        let mut lin = 0.0;
        for c in 0..q {
            lin += hbar[c * p + j] * stats.cross[(j, c)];
        }
        let w = row_second_moment(&vh, p, q, j);
        let quad = stats.sum_q.component_mul(&w).sum();
        stats.sum_d2[j] - 2.0 * lin + quad
    })
}

/// Closed-form M-step for `(μ_g, Σ_g, μ_h, Σ_h, m0, P0, R)`.
pub fn m_step_messm(effects: &[SubjectEffects], moments: &[SmootherMoments], data: &[Sequence], s_h: &DMatrix<f64>) -> MessmParams {
    let n = effects.len() as f64;
    let (mu_g, sigma_g) = pooled(effects.iter().map(|e| (&e.q_g.nu, &e.q_g.omega)), n);
    let (mu_h, sigma_h) = pooled(effects.iter().map(|e| (&e.q_h.nu, &e.q_h.omega)), n);
    let (m0, p0) = pooled(moments.iter().map(|m| (&m.m_hat[0], &m.p_hat[0])), n);

    let (p, q) = (data[0].obs_dim(), m0.len());
    let mut r = DVector::zeros(p);
    let mut total_t = 0.0;
    for ((seq, mom), eff) in data.iter().zip(moments).zip(effects) {
        let stats = obs_stats(seq, mom);
        r += expected_obs_sq(&stats, &eff.q_h.nu, &eff.q_h.omega, s_h, p, q);
        total_t += seq.len() as f64;
    }
    r /= total_t;
    MessmParams { m0, p0, r, mu_g, sigma_g, mu_h, sigma_h }
}

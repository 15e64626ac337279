use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::gen::{MessmTruth, Truth};
use crate::emission::{BernoulliEmission, EmissionModel, GaussianEmission};
use crate::error::{AvemError, Result};
use crate::messm::{flip_effects, flip_params, unvecl, vecl, MessmFit};
use crate::mhmm::{align_states, MhmmFit, MhmmParams};
use crate::partial::{LocalizedGaussianEmission, PavemFit};

/// Per-replicate error metrics; fields that do not apply to a model are `None`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub rmse_mu: Option<f64>,
    pub rmse_sigma2: Option<f64>,
    /// Mean absolute entrywise error of `Γ̂`.
    pub gamma_abs_err: Option<f64>,
    /// `(1/n) Σ_i ‖f̂_i − f_i‖²`; for the localized model this is `f_a`.
    pub mse_f: Option<f64>,
    /// `(1/n) Σ_i (f̂_b,i − f_b,i)²`.
    pub mse_fb: Option<f64>,
    /// `|tr(Σ̂)/d − τ²|`.
    pub tau2_abs_err: Option<f64>,
    pub rmse_beta: Option<f64>,
    /// Every estimated logit intercept has the sign of its true counterpart
    /// after both are sorted in descending order.
    pub beta_order_ok: Option<bool>,
    pub rmse_g: Option<f64>,
    pub rmse_h: Option<f64>,
    pub rmse_r: Option<f64>,
    pub rmse_g_i: Option<f64>,
    pub rmse_h_i: Option<f64>,
    pub n_iter: usize,
    pub converged: bool,
    pub wall_time: f64,
}

/// A finished fit of any supported model.
#[derive(Debug, Clone)]
pub enum FittedModel {
    Gaussian(MhmmFit<GaussianEmission>),
    Bernoulli(MhmmFit<BernoulliEmission>),
    Messm(MessmFit),
    Pavem(PavemFit),
    Localized(MhmmFit<LocalizedGaussianEmission>),
}

fn rmse(a: impl IntoIterator<Item = f64>, b: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for (x, y) in a.into_iter().zip(b) {
        s += (x - y) * (x - y);
        n += 1;
    }
    (s / n.max(1) as f64).sqrt()
}

fn mean_abs(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len().max(1) as f64
}

fn check_states(est: usize, truth: usize) -> Result<()> {
    if est != truth {
        return Err(AvemError::DimensionMismatch { what: "number of states (scoring)", expected: truth, found: est });
    }
    Ok(())
}

fn effect_mse(est: &[DVector<f64>], truth: &[DVector<f64>]) -> f64 {
    est.iter().zip(truth).map(|(a, b)| (a - b).norm_squared()).sum::<f64>() / truth.len().max(1) as f64
}

fn tau2_err<E: EmissionModel>(est: &MhmmParams<E>, truth: &MhmmParams<E>) -> f64 {
    let d = est.sigma.nrows() as f64;
    (est.sigma.trace() / d - truth.sigma.trace() / d).abs()
}

/// Reflects the fitted latent coordinates so that each population loading
/// column has non-negative inner product with the true one.
pub fn align_messm_signs(fit: &mut MessmFit, truth_h: &DMatrix<f64>) {
    let (p, q) = truth_h.shape();
    let h = unvecl(&fit.params.mu_h, p, q);
    let signs: Vec<f64> = (0..q).map(|c| if h.column(c).dot(&truth_h.column(c)) < 0.0 { -1.0 } else { 1.0 }).collect();
    if signs.iter().all(|s| *s > 0.0) {
        return;
    }
    flip_params(&signs, &mut fit.params);
    for e in &mut fit.q_factors {
        flip_effects(&signs, e, p);
    }
}

fn score_messm(fit: &MessmFit, truth: &MessmTruth) -> Result<ReplicateResult> {
    let (p, q) = truth.h.shape();
    if fit.params.obs_dim() != p || fit.params.state_dim() != q {
        return Err(AvemError::DimensionMismatch { what: "MESSM dimensions (scoring)", expected: p, found: fit.params.obs_dim() });
    }
    let mut fit = fit.clone();
    align_messm_signs(&mut fit, &truth.h);
    let pr = &fit.params;
    let true_g = DVector::from_column_slice(truth.g.as_slice());
    let n = truth.g_i.len();
    let g_i_err = fit
        .q_factors
        .iter()
        .zip(&truth.g_i)
        .map(|(e, g)| (&e.q_g.nu - DVector::from_column_slice(g.as_slice())).norm_squared())
        .sum::<f64>()
        / (n * q * q) as f64;
    let h_i_err = fit
        .q_factors
        .iter()
        .zip(&truth.h_i)
        .map(|(e, h)| (&e.q_h.nu - vecl(h)).norm_squared())
        .sum::<f64>()
        / (n * vecl(&truth.h).len()) as f64;
    Ok(ReplicateResult {
        rmse_g: Some(rmse(pr.mu_g.iter().copied(), true_g.iter().copied())),
        rmse_h: Some(rmse(pr.mu_h.iter().copied(), vecl(&truth.h).iter().copied())),
        rmse_r: Some(rmse(pr.r.iter().copied(), truth.r.iter().copied())),
        rmse_g_i: Some(g_i_err.sqrt()),
        rmse_h_i: Some(h_i_err.sqrt()),
        n_iter: fit.n_iter,
        converged: fit.converged,
        wall_time: fit.wall_time_seconds,
        ..Default::default()
    })
}

/// Error metrics of `fit` against the generating `truth`.
pub fn score(fit: &FittedModel, truth: &Truth) -> Result<ReplicateResult> {
    match (fit, truth) {
        (FittedModel::Gaussian(f), Truth::Gaussian(t)) => {
            let tp = align_states(&t.params);
            let (e, te) = (&f.params.emission, &tp.emission);
            check_states(e.n_states(), te.n_states())?;
            if e.obs_dim() != te.obs_dim() {
                return Err(AvemError::DimensionMismatch { what: "observation dimension (scoring)", expected: te.obs_dim(), found: e.obs_dim() });
            }
            let nus: Vec<DVector<f64>> = f.q_factors.iter().map(|q| q.nu.clone()).collect();
            Ok(ReplicateResult {
                rmse_mu: Some(rmse(e.mu.iter().copied(), te.mu.iter().copied())),
                rmse_sigma2: Some(rmse(e.sigma2.iter().copied(), te.sigma2.iter().copied())),
                gamma_abs_err: Some(mean_abs(&f.params.chain.gamma, &tp.chain.gamma)),
                mse_f: Some(effect_mse(&nus, &t.effects)),
                tau2_abs_err: Some(tau2_err(&f.params, &tp)),
                n_iter: f.n_iter,
                converged: f.converged,
                wall_time: f.wall_time_seconds,
                ..Default::default()
            })
        }
        (FittedModel::Bernoulli(f), Truth::Bernoulli(t)) => {
            let tp = align_states(&t.params);
            let (b, tb) = (&f.params.emission.beta, &tp.emission.beta);
            check_states(b.len(), tb.len())?;
            let nus: Vec<DVector<f64>> = f.q_factors.iter().map(|q| q.nu.clone()).collect();
            let order_ok = b.iter().zip(tb).all(|(x, y)| x.signum() == y.signum());
            Ok(ReplicateResult {
                rmse_beta: Some(rmse(b.iter().copied(), tb.iter().copied())),
                beta_order_ok: Some(order_ok),
                gamma_abs_err: Some(mean_abs(&f.params.chain.gamma, &tp.chain.gamma)),
                mse_f: Some(effect_mse(&nus, &t.effects)),
                tau2_abs_err: Some(tau2_err(&f.params, &tp)),
                n_iter: f.n_iter,
                converged: f.converged,
                wall_time: f.wall_time_seconds,
                ..Default::default()
            })
        }
        (FittedModel::Messm(f), Truth::Messm(t)) => score_messm(f, t),
        (FittedModel::Pavem(f), Truth::Localized(t)) => {
            let mut true_mu = t.mu.clone();
            true_mu.sort_by(|a, b| b.total_cmp(a));
            let e = &f.params.base.emission;
            check_states(e.n_states(), true_mu.len())?;
            let n = t.f_a.len() as f64;
            let mse_a = f.q_factors.iter().zip(&t.f_a).map(|(q, a)| (q.q_a.nu[0] - a).powi(2)).sum::<f64>() / n;
            let mse_b = f.q_factors.iter().zip(&t.f_b).map(|(q, b)| (q.grid.mean() - b).powi(2)).sum::<f64>() / n;
            let tg = align_chain(&t.chain.gamma, &t.mu);
            Ok(ReplicateResult {
                rmse_mu: Some(rmse(e.mu.iter().copied(), true_mu.iter().copied())),
                rmse_sigma2: Some(rmse(e.sigma2.iter().copied(), std::iter::repeat(t.sigma2))),
                gamma_abs_err: Some(mean_abs(&f.params.base.chain.gamma, &tg)),
                mse_f: Some(mse_a),
                mse_fb: Some(mse_b),
                n_iter: f.n_iter,
                converged: f.converged,
                wall_time: f.wall_time_seconds,
                ..Default::default()
            })
        }
        (FittedModel::Localized(f), Truth::Localized(t)) => {
            let mut true_mu = t.mu.clone();
            true_mu.sort_by(|a, b| b.total_cmp(a));
            let e = &f.params.emission;
            check_states(e.n_states(), true_mu.len())?;
            let n = t.f_a.len() as f64;
            let mse_a = f.q_factors.iter().zip(&t.f_a).map(|(q, a)| (q.nu[0] - a).powi(2)).sum::<f64>() / n;
            let mse_b = f.q_factors.iter().zip(&t.f_b).map(|(q, b)| (q.nu[1] - b).powi(2)).sum::<f64>() / n;
            let tg = align_chain(&t.chain.gamma, &t.mu);
            Ok(ReplicateResult {
                rmse_mu: Some(rmse(e.mu.iter().copied(), true_mu.iter().copied())),
                rmse_sigma2: Some(rmse(e.sigma2.iter().copied(), std::iter::repeat(t.sigma2))),
                gamma_abs_err: Some(mean_abs(&f.params.chain.gamma, &tg)),
                mse_f: Some(mse_a),
                mse_fb: Some(mse_b),
                n_iter: f.n_iter,
                converged: f.converged,
                wall_time: f.wall_time_seconds,
                ..Default::default()
            })
        }
        _ => Err(AvemError::InvalidParameter("fitted model does not match the ground-truth scenario".into())),
    }
}

/// `Γ` relabeled so that the state means are descending.
fn align_chain(gamma: &DMatrix<f64>, mu: &[f64]) -> DMatrix<f64> {
    let k = mu.len();
    let mut perm: Vec<usize> = (0..k).collect();
    perm.sort_by(|&a, &b| mu[b].total_cmp(&mu[a]));
    DMatrix::from_fn(k, k, |a, b| gamma[(perm[a], perm[b])])
}

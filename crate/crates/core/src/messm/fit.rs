use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use super::align::{sign_align, AlignOutcome};
use super::elbo::subject_elbo;
use super::mstep::m_step_messm;
use super::reduced::{fit_reduced_lgssm, pca_start};
use super::update::{anchored_smoother, update_q_g, update_q_h};
use super::{build_s_h, vecl, MessmParams, SubjectEffects};
use crate::data::{total_steps, Sequence};
use crate::error::{AvemError, Result};
use crate::kalman::SmootherMoments;
use crate::par::{self, Parallelism};
use crate::report::{push_warning, relative_change, FitReport, PassCounter};

pub type MessmFit = FitReport<MessmParams, SubjectEffects>;

#[derive(Debug, Clone, PartialEq)]
pub struct MessmConfig {
    pub max_iter: usize,
    pub rel_tol: f64,
    pub sign_align: bool,
    pub parallelism: Parallelism,
    pub seed: u64,
    /// Iteration cap and tolerance of the shared-parameter warm start.
    pub reduced_max_iter: usize,
    pub reduced_rel_tol: f64,
    /// Initial `Σ_g = Σ_h = init_sigma · I`.
    pub init_sigma: f64,
}

impl Default for MessmConfig {
    fn default() -> Self {
        Self {
            max_iter: 500,
            rel_tol: 1e-6,
            sign_align: true,
            parallelism: Parallelism::default(),
            seed: 0,
            reduced_max_iter: 200,
            reduced_rel_tol: 1e-8,
            init_sigma: 0.1,
        }
    }
}

/// Starting parameters from the homogeneous model fitted by plain EM.
pub fn init_messm(data: &[Sequence], q: usize, config: &MessmConfig) -> Result<MessmParams> {
    let start = pca_start(data, q)?;
    let red = fit_reduced_lgssm(data, start, config.reduced_max_iter, config.reduced_rel_tol, config.parallelism)?;
    let spec = red.spec;
    let lh = spec.h.nrows() * q - q * (q - 1) / 2;
    let params = MessmParams {
        mu_g: DVector::from_column_slice(spec.g.as_slice()),
        sigma_g: DMatrix::identity(q * q, q * q) * config.init_sigma,
        mu_h: vecl(&spec.h),
        sigma_h: DMatrix::identity(lh, lh) * config.init_sigma,
        m0: spec.m0,
        p0: spec.p0,
        r: spec.r,
    };
    params.validate()?;
    Ok(params)
}

/// Anchored variational EM for the mixed-effects state-space model.
pub fn fit_messm(data: &[Sequence], init: &MessmParams, config: &MessmConfig) -> Result<MessmFit> {
    let start = Instant::now();
    init.validate()?;
    if data.is_empty() {
        return Err(AvemError::InvalidParameter("dataset has no subjects".into()));
    }
    if config.max_iter == 0 || !(config.rel_tol > 0.0) {
        return Err(AvemError::InvalidParameter("max_iter and rel_tol must be positive".into()));
    }
    let (p, q) = (init.obs_dim(), init.state_dim());
    for seq in data {
        if seq.obs_dim() != p {
            return Err(AvemError::DimensionMismatch { what: "MESSM observation dimension", expected: p, found: seq.obs_dim() });
        }
    }
    let s_h = build_s_h(p, q)?;
    let counter = PassCounter::default();

    let mut params = init.clone();
    let mut effects: Vec<SubjectEffects> = vec![SubjectEffects::from_prior(&params); data.len()];
    let mut trace = Vec::new();
    let mut passes = Vec::new();
    let mut warnings = Vec::new();
    let mut converged = false;

    for iter in 0..config.max_iter {
        let group_h = params.h_mean();
        let step: Vec<(SubjectEffects, SmootherMoments, AlignOutcome)> = par::try_map(config.parallelism, data, |i, seq| {
            let mut eff = effects[i].clone();
            eff.g0 = eff.q_g.nu.clone();
            eff.h0 = eff.q_h.nu.clone();
            let mut mom = anchored_smoother(&params, seq, &eff.g0, &eff.h0)?;
            counter.add(1);
            eff.q_g = update_q_g(&params, &mom)?;
            eff.q_h = update_q_h(&params, &mom, seq, &s_h)?;
            let outcome = if config.sign_align { sign_align(&group_h, &mut eff, &mut mom) } else { AlignOutcome::default() };
            Ok((eff, mom, outcome))
        })?;
        let mut moments = Vec::with_capacity(data.len());
        effects.clear();
        for (i, (eff, mom, outcome)) in step.into_iter().enumerate() {
            for c in outcome.skipped {
                push_warning(&mut warnings, format!("subject {i}: loading column {c} has zero norm; sign alignment skipped"));
            }
            effects.push(eff);
            moments.push(mom);
        }

        params = m_step_messm(&effects, &moments, data, &s_h);
        params.validate()?;

        let per_subject = par::try_map(config.parallelism, data, |i, seq| subject_elbo(&params, seq, &moments[i], &effects[i], &s_h))?;
        let elbo: f64 = per_subject.iter().sum();
        if !elbo.is_finite() {
            return Err(AvemError::NonFinite("MESSM anchored ELBO".into()));
        }
        passes.push(counter.take());
        trace.push(elbo);
        if iter >= 1 && relative_change(trace[iter - 1], elbo) < config.rel_tol {
            converged = true;
            break;
        }
    }

    let anchors = effects.iter().map(|e| DVector::from_iterator(e.g0.len() + e.h0.len(), e.g0.iter().chain(e.h0.iter()).copied())).collect();
    Ok(FitReport {
        params,
        q_factors: effects,
        anchors,
        n_iter: trace.len(),
        elbo_trace: trace,
        wall_time_seconds: start.elapsed().as_secs_f64(),
        passes_per_iter: passes,
        warnings,
        converged,
        total_steps: total_steps(data),
    })
}

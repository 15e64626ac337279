use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use super::elbo::elbo_from_posteriors;
use super::estep::{e_step_local, update_q};
use super::mstep::{m_step_gamma, m_step_pi, m_step_sigma};
use super::{AvemConfig, EStepMethod, MhmmFit, MhmmParams};
use crate::data::{total_steps, Sequence};
use crate::emission::{EffectPosterior, EmissionModel};
use crate::error::{AvemError, Result};
use crate::factor::QFactor;
use crate::hmm::{ChainParams, StatePosterior};
use crate::par;
use crate::quadrature::GaussHermite;
use crate::report::{push_warning, relative_change, FitReport, PassCounter};

pub fn resolve_method<E: EmissionModel>(requested: Option<EStepMethod>, emission: &E) -> Result<EStepMethod> {
    match requested {
        Some(EStepMethod::ClosedForm) if !emission.has_closed_form_gaussian() => {
            Err(AvemError::UnsupportedEmission("closed-form E-step requires Gaussian emissions".into()))
        }
        Some(m) => Ok(m),
        None if emission.has_closed_form_gaussian() => Ok(EStepMethod::ClosedForm),
        None => Ok(EStepMethod::Laplace),
    }
}

/// Relabels states so that `state_order_key` is descending.
pub fn align_states<E: EmissionModel>(params: &MhmmParams<E>) -> MhmmParams<E> {
    let k = params.chain.n_states();
    let mut perm: Vec<usize> = (0..k).collect();
    perm.sort_by(|&a, &b| params.emission.state_order_key(b).total_cmp(&params.emission.state_order_key(a)));
    let chain = ChainParams {
        pi: perm.iter().map(|&s| params.chain.pi[s]).collect(),
        gamma: DMatrix::from_fn(k, k, |a, b| params.chain.gamma[(perm[a], perm[b])]),
    };
    MhmmParams { chain, emission: params.emission.permute_states(&perm), sigma: params.sigma.clone() }
}

pub(crate) fn check_data<E: EmissionModel>(data: &[Sequence], emission: &E) -> Result<()> {
    if data.is_empty() {
        return Err(AvemError::InvalidParameter("dataset has no subjects".into()));
    }
    for seq in data {
        emission.check_sequence(seq)?;
    }
    Ok(())
}

/// Global M-step shared by the variational fits.
pub(crate) fn m_step<E: EmissionModel>(
    params: &MhmmParams<E>,
    data: &[Sequence],
    posts: &[StatePosterior],
    effect_posts: &[EffectPosterior<'_>],
    sigma: Option<DMatrix<f64>>,
    rule: &GaussHermite,
    warnings: &mut Vec<String>,
) -> Result<MhmmParams<E>> {
    let pi = m_step_pi(posts);
    let gamma = if posts.iter().any(|p| !p.xi.is_empty()) {
        let g = m_step_gamma(posts);
        for r in &g.degenerate_rows {
            push_warning(warnings, format!("transition row {r} had no expected visits; reset to uniform"));
        }
        g.gamma
    } else {
        params.chain.gamma.clone()
    };
    let emission = params.emission.m_step(data, effect_posts, rule)?;
    Ok(MhmmParams {
        chain: ChainParams { pi, gamma },
        emission,
        sigma: sigma.unwrap_or_else(|| params.sigma.clone()),
    })
}

/// Anchored variational EM for a mixed HMM.
pub fn fit_mhmm<E: EmissionModel>(data: &[Sequence], init: &MhmmParams<E>, config: &AvemConfig) -> Result<MhmmFit<E>> {
    let start = Instant::now();
    config.validate()?;
    init.validate()?;
    check_data(data, &init.emission)?;
    let method = resolve_method(config.e_step_method, &init.emission)?;
    let rule = GaussHermite::new(config.n_quad)?;
    let counter = PassCounter::default();

    let mut params = init.clone();
    let mut qs: Vec<QFactor> = vec![QFactor::prior(&params.sigma); data.len()];
    let mut anchors: Vec<DVector<f64>> = qs.iter().map(|q| q.nu.clone()).collect();
    let mut trace = Vec::new();
    let mut passes = Vec::new();
    let mut warnings = Vec::new();
    let mut converged = false;

    for iter in 0..config.max_iter {
        anchors = qs.iter().map(|q| q.nu.clone()).collect();
        let step: Vec<(StatePosterior, QFactor)> = par::try_map(config.parallelism, data, |i, seq| {
            let post = e_step_local(&params, seq, &anchors[i])?;
            counter.add(1);
            let q = update_q(method, &params, seq, &post, &qs[i], &rule)?;
            Ok((post, q))
        })?;
        let (posts, new_qs): (Vec<_>, Vec<_>) = step.into_iter().unzip();
        qs = new_qs;

        let effect_posts: Vec<EffectPosterior<'_>> =
            posts.iter().zip(&qs).map(|(p, q)| EffectPosterior::Variational { zeta: &p.zeta, q }).collect();
        let sigma = (!config.sigma_fixed).then(|| m_step_sigma(&qs));
        params = m_step(&params, data, &posts, &effect_posts, sigma, &rule, &mut warnings)?;

        let elbo = elbo_from_posteriors(&params, data, &posts, &qs, &rule)?;
        passes.push(counter.take());
        trace.push(elbo);
        if iter >= 1 && relative_change(trace[iter - 1], elbo) < config.rel_tol {
            converged = true;
            break;
        }
    }

    Ok(FitReport {
        params: align_states(&params),
        q_factors: qs,
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

use nalgebra::DVector;

use super::estep::e_step_local;
use super::MhmmParams;
use crate::data::Sequence;
use crate::emission::EmissionModel;
use crate::error::{AvemError, Result};
use crate::factor::QFactor;
use crate::hmm::{posterior_entropy, ChainParams, StatePosterior};
use crate::quadrature::GaussHermite;

/// `Σ ζ₁ log π + Σ ξ log Γ`, skipping zero-weight terms.
pub(crate) fn chain_terms(chain: &ChainParams, post: &StatePosterior) -> f64 {
    let k = chain.n_states();
    let mut v = 0.0;
    for s in 0..k {
        let z = post.zeta[(0, s)];
        if z > 0.0 {
            v += z * chain.pi[s].ln();
        }
    }
    for xi in &post.xi {
        for a in 0..k {
            for b in 0..k {
                let x = xi[(a, b)];
                if x > 0.0 {
                    v += x * chain.gamma[(a, b)].ln();
                }
            }
        }
    }
    v
}

/// Anchored ELBO contribution of one subject, given the state posterior at its
/// anchor and its variational factor.
pub fn subject_elbo<E: EmissionModel>(
    params: &MhmmParams<E>,
    seq: &Sequence,
    post: &StatePosterior,
    q: &QFactor,
    rule: &GaussHermite,
) -> Result<f64> {
    let el = params.emission.expected_log_emissions(seq, q, rule)?;
    let mut emis = 0.0;
    for t in 0..seq.len() {
        for k in 0..params.emission.n_states() {
            let z = post.zeta[(t, k)];
            if z > 0.0 {
                emis += z * el[(t, k)];
            }
        }
    }
    let kl = q.kl_to(&DVector::zeros(q.dim()), &params.sigma)?;
    Ok(emis + chain_terms(&params.chain, post) - kl + posterior_entropy(post))
}

/// Sum of [`subject_elbo`] over subjects, in subject order.
pub fn elbo_from_posteriors<E: EmissionModel>(
    params: &MhmmParams<E>,
    data: &[Sequence],
    posts: &[StatePosterior],
    qs: &[QFactor],
    rule: &GaussHermite,
) -> Result<f64> {
    let mut total = 0.0;
    for ((seq, post), q) in data.iter().zip(posts).zip(qs) {
        total += subject_elbo(params, seq, post, q, rule)?;
    }
    if !total.is_finite() {
        return Err(AvemError::NonFinite("anchored ELBO".into()));
    }
    Ok(total)
}

/// Anchored ELBO with the state posteriors recomputed at `anchors`.
pub fn anchored_elbo<E: EmissionModel>(
    params: &MhmmParams<E>,
    data: &[Sequence],
    qs: &[QFactor],
    anchors: &[DVector<f64>],
    rule: &GaussHermite,
) -> Result<f64> {
    let posts = data
        .iter()
        .zip(anchors)
        .map(|(seq, f0)| e_step_local(params, seq, f0))
        .collect::<Result<Vec<_>>>()?;
    elbo_from_posteriors(params, data, &posts, qs, rule)
}

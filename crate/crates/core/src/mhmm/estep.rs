use nalgebra::{DMatrix, DVector};

use super::{EStepMethod, MhmmParams};
use crate::data::Sequence;
use crate::emission::EmissionModel;
use crate::error::{AvemError, Result};
use crate::factor::QFactor;
use crate::hmm::{forward_backward, LogEmissions, StatePosterior};
use crate::linalg::{cholesky, spd_inverse, symmetrized};
use crate::quadrature::GaussHermite;

const NEWTON_MAX_STEPS: usize = 50;
const NEWTON_GRAD_TOL: f64 = 1e-8;
const QUAD_MAX_STEPS: usize = 200;

/// `T × K` log emissions with the effect pinned at `f`.
pub fn log_emissions_at<E: EmissionModel>(emission: &E, seq: &Sequence, f: &DVector<f64>) -> Result<LogEmissions> {
    if f.iter().any(|v| !v.is_finite()) {
        return Err(AvemError::NonFinite("anchor".into()));
    }
    if f.len() != emission.effect_dim() {
        return Err(AvemError::DimensionMismatch { what: "anchor", expected: emission.effect_dim(), found: f.len() });
    }
    LogEmissions::from_fn(seq.len(), emission.n_states(), |t, k| emission.log_density(k, f.as_slice(), seq.step(t)))
}

/// One forward–backward pass at the anchor `f0`.
pub fn e_step_local<E: EmissionModel>(params: &MhmmParams<E>, seq: &Sequence, f0: &DVector<f64>) -> Result<StatePosterior> {
    let log_e = log_emissions_at(&params.emission, seq, f0)?;
    forward_backward(&log_e, &params.chain)
}

fn check_zeta(seq: &Sequence, post: &StatePosterior, k: usize) -> Result<()> {
    if post.zeta.nrows() != seq.len() || post.zeta.ncols() != k {
        return Err(AvemError::DimensionMismatch { what: "state posterior rows", expected: seq.len(), found: post.zeta.nrows() });
    }
    Ok(())
}

/// Exact Gaussian update: `Ω⁻¹ = Σ⁻¹ + Σ_{t,k} ζ σ_k⁻² I`,
/// `ν = Ω Σ_{t,k} ζ σ_k⁻² (D_t − μ_k)`.
pub fn update_q_closed_form<E: EmissionModel>(params: &MhmmParams<E>, seq: &Sequence, post: &StatePosterior) -> Result<QFactor> {
    let g = params
        .emission
        .as_gaussian()
        .ok_or_else(|| AvemError::UnsupportedEmission("closed-form update needs Gaussian emissions".into()))?;
    check_zeta(seq, post, g.n_states())?;
    let p = g.obs_dim();
    let mut prec_scalar = 0.0;
    let mut b = DVector::zeros(p);
    for t in 0..seq.len() {
        let y = seq.row(t);
        for k in 0..g.n_states() {
            let s = post.zeta[(t, k)] / g.sigma2[k];
            prec_scalar += s;
            for j in 0..p {
                b[j] += s * (y[j] - g.mu[(k, j)]);
            }
        }
    }
    let sigma_inv = spd_inverse(&params.sigma, "random-effect covariance")?;
    closed_form_factor(&sigma_inv, prec_scalar, &b)
}

pub(crate) fn closed_form_factor(sigma_inv: &DMatrix<f64>, prec_scalar: f64, b: &DVector<f64>) -> Result<QFactor> {
    let mut prec = sigma_inv.clone();
    for j in 0..prec.nrows() {
        prec[(j, j)] += prec_scalar;
    }
    let omega = spd_inverse(&prec, "variational precision")?;
    let nu = &omega * b;
    Ok(QFactor { nu, omega })
}

/// `Σ_{t,k} ζ_{kt} log e_{kt}(f)` with its gradient and Hessian in `f`.
fn data_terms<E: EmissionModel>(em: &E, seq: &Sequence, zeta: &DMatrix<f64>, f: &[f64]) -> (f64, DVector<f64>, DMatrix<f64>) {
    let d = f.len();
    let mut val = 0.0;
    let mut grad = DVector::zeros(d);
    let mut hess = DMatrix::zeros(d, d);
    let mut g = vec![0.0; d];
    let mut h = DMatrix::zeros(d, d);
    for t in 0..seq.len() {
        let step = seq.step(t);
        for k in 0..em.n_states() {
            let z = zeta[(t, k)];
            if z == 0.0 {
                continue;
            }
            val += z * em.log_density(k, f, step);
            em.grad_effect(k, f, step, &mut g);
            em.hess_effect(k, f, step, &mut h);
            for a in 0..d {
                grad[a] += z * g[a];
            }
            hess += z * &h;
        }
    }
    (val, grad, hess)
}

/// Laplace update: mode of `ℓ^A(f) = −½ fᵀΣ⁻¹f + Σ ζ log e(f)` by damped
/// Newton from `f0`, with `Ω` the inverse negative Hessian there.
pub fn update_q_laplace<E: EmissionModel>(
    params: &MhmmParams<E>,
    seq: &Sequence,
    post: &StatePosterior,
    f0: &DVector<f64>,
) -> Result<QFactor> {
    let em = &params.emission;
    check_zeta(seq, post, em.n_states())?;
    let sigma_inv = spd_inverse(&params.sigma, "random-effect covariance")?;
    let objective = |f: &DVector<f64>| {
        let (v, g, h) = data_terms(em, seq, &post.zeta, f.as_slice());
        let sf = &sigma_inv * f;
        (v - 0.5 * f.dot(&sf), g - sf, h - &sigma_inv)
    };
    let mut f = f0.clone();
    let (mut val, mut grad, mut hess) = objective(&f);
    let mut converged = false;
    for _ in 0..NEWTON_MAX_STEPS {
        if grad.amax() < NEWTON_GRAD_TOL {
            converged = true;
            break;
        }
        let neg_h = symmetrized(-&hess);
        let step = cholesky(&neg_h, "negative Hessian in Laplace update")?.solve(&grad);
        let mut scale = 1.0;
        let mut moved = false;
        for _ in 0..40 {
            let cand = &f + scale * &step;
            let (cv, cg, ch) = objective(&cand);
            if cv.is_finite() && cv >= val - 1e-12 * (1.0 + val.abs()) {
                f = cand;
                val = cv;
                grad = cg;
                hess = ch;
                moved = true;
                break;
            }
            scale *= 0.5;
        }
        if !moved {
            break;
        }
    }
    if !converged && grad.amax() >= NEWTON_GRAD_TOL {
        return Err(AvemError::NoConvergence { what: "Laplace Newton iteration", iterations: NEWTON_MAX_STEPS });
    }
    let omega = spd_inverse(&symmetrized(-hess), "negative Hessian at the Laplace mode")?;
    Ok(QFactor { nu: f, omega })
}

struct QuadStats {
    objective: f64,
    grad: DVector<f64>,
    hess: DMatrix<f64>,
}

fn quad_stats<E: EmissionModel>(
    em: &E,
    seq: &Sequence,
    zeta: &DMatrix<f64>,
    q: &QFactor,
    sigma: &DMatrix<f64>,
    rule: &GaussHermite,
) -> Result<QuadStats> {
    let (nodes, weights) = rule.gaussian_nodes(&q.nu, &q.omega)?;
    let d = q.dim();
    let mut val = 0.0;
    let mut grad = DVector::zeros(d);
    let mut hess = DMatrix::zeros(d, d);
    for (f, w) in nodes.iter().zip(&weights) {
        let (v, g, h) = data_terms(em, seq, zeta, f.as_slice());
        val += w * v;
        grad.axpy(*w, &g, 1.0);
        hess += *w * &h;
    }
    let kl = q.kl_to(&DVector::zeros(d), sigma)?;
    Ok(QuadStats { objective: val - kl, grad, hess })
}

/// Per-subject variational objective `E_q[Σ ζ log e] − KL(q ‖ N(0, Σ))` with
/// the expectation taken by Gauss–Hermite nodes mapped through `q`.
pub fn q_objective_quadrature<E: EmissionModel>(
    params: &MhmmParams<E>,
    seq: &Sequence,
    post: &StatePosterior,
    q: &QFactor,
    rule: &GaussHermite,
) -> Result<f64> {
    Ok(quad_stats(&params.emission, seq, &post.zeta, q, &params.sigma, rule)?.objective)
}

/// Maximizes the quadrature objective over `(ν, Ω)` starting from `prev`.
///
/// Fixed-point iteration `Ω⁻¹ ← Σ⁻¹ − E_q[∇² ℓ]`, `ν ← ν + Ω (E_q[∇ ℓ] − Σ⁻¹ν)`
/// with backtracking along the segment to the proposal.
pub fn update_q_quadrature<E: EmissionModel>(
    params: &MhmmParams<E>,
    seq: &Sequence,
    post: &StatePosterior,
    prev: &QFactor,
    rule: &GaussHermite,
) -> Result<QFactor> {
    if rule.len() < 3 {
        return Err(AvemError::InvalidParameter("quadrature update needs at least 3 nodes".into()));
    }
    let em = &params.emission;
    check_zeta(seq, post, em.n_states())?;
    let sigma_inv = spd_inverse(&params.sigma, "random-effect covariance")?;
    let mut q = prev.clone();
    let mut stats = quad_stats(em, seq, &post.zeta, &q, &params.sigma, rule)?;
    for _ in 0..QUAD_MAX_STEPS {
        let prec = symmetrized(&sigma_inv - &stats.hess);
        let omega_new = spd_inverse(&prec, "quadrature precision")?;
        let nu_new = &q.nu + &omega_new * (&stats.grad - &sigma_inv * &q.nu);
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let cand = QFactor {
                nu: &q.nu + scale * (&nu_new - &q.nu),
                omega: symmetrized(&q.omega + scale * (&omega_new - &q.omega)),
            };
            if let Ok(s) = quad_stats(em, seq, &post.zeta, &cand, &params.sigma, rule) {
                if s.objective.is_finite() && s.objective >= stats.objective - 1e-12 * (1.0 + stats.objective.abs()) {
                    accepted = Some((cand, s));
                    break;
                }
            }
            scale *= 0.5;
        }
        let Some((cand, s)) = accepted else { break };
        let delta = (&cand.nu - &q.nu).amax().max((&cand.omega - &q.omega).amax());
        let scale_ref = 1.0 + q.nu.amax().max(q.omega.amax());
        q = cand;
        stats = s;
        if delta <= 1e-11 * scale_ref {
            return Ok(q);
        }
    }
    // the last accepted iterate is still the best found
    if !stats.objective.is_finite() {
        return Err(AvemError::NoConvergence { what: "quadrature variational update", iterations: QUAD_MAX_STEPS });
    }
    Ok(q)
}

/// Dispatches to the requested q-update.
pub fn update_q<E: EmissionModel>(
    method: EStepMethod,
    params: &MhmmParams<E>,
    seq: &Sequence,
    post: &StatePosterior,
    prev: &QFactor,
    rule: &GaussHermite,
) -> Result<QFactor> {
    match method {
        EStepMethod::ClosedForm => update_q_closed_form(params, seq, post),
        EStepMethod::Laplace => update_q_laplace(params, seq, post, &prev.nu),
        EStepMethod::Quadrature => update_q_quadrature(params, seq, post, prev, rule),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emission::{BernoulliEmission, GaussianEmission};
    use crate::hmm::ChainParams;

    fn one_state(d: usize, tau2: f64) -> MhmmParams<GaussianEmission> {
        MhmmParams::new(
            ChainParams::sticky(1, 1.0),
            GaussianEmission::new(DMatrix::zeros(1, d), vec![1.0]).unwrap(),
            DMatrix::identity(d, d) * tau2,
        )
        .unwrap()
    }

    #[test]
    fn scalar_closed_form_values() {
        let params = one_state(1, 1.0);
        let seq = Sequence::new(1, vec![1.0; 4]).unwrap();
        let post = e_step_local(&params, &seq, &DVector::zeros(1)).unwrap();
        let q = update_q_closed_form(&params, &seq, &post).unwrap();
        assert!((q.omega[(0, 0)] - 0.2).abs() < 1e-15);
        assert!((q.nu[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn closed_form_rejects_bernoulli() {
        let params = MhmmParams::new(
            ChainParams::sticky(2, 0.9),
            BernoulliEmission::new(vec![1.0, -1.0]).unwrap(),
            DMatrix::identity(1, 1),
        )
        .unwrap();
        let seq = Sequence::new(1, vec![1.0, 0.0, 1.0]).unwrap();
        let post = e_step_local(&params, &seq, &DVector::zeros(1)).unwrap();
        assert!(matches!(update_q_closed_form(&params, &seq, &post), Err(AvemError::UnsupportedEmission(_))));
    }

    #[test]
    fn quadrature_rejects_short_rules() {
        let params = one_state(1, 1.0);
        let seq = Sequence::new(1, vec![0.5; 3]).unwrap();
        let post = e_step_local(&params, &seq, &DVector::zeros(1)).unwrap();
        let rule = GaussHermite::new(2).unwrap();
        assert!(update_q_quadrature(&params, &seq, &post, &QFactor::prior(&params.sigma), &rule).is_err());
    }

    #[test]
    fn anchor_must_be_finite() {
        let params = one_state(1, 1.0);
        let seq = Sequence::new(1, vec![0.5; 3]).unwrap();
        assert!(e_step_local(&params, &seq, &DVector::from_element(1, f64::NAN)).is_err());
    }
}

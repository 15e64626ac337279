use nalgebra::DMatrix;

use crate::factor::QFactor;
use crate::hmm::StatePosterior;
use crate::linalg::symmetrized;

/// `π_k = (1/n) Σ_i ζ_{ik1}`.
pub fn m_step_pi(posts: &[StatePosterior]) -> Vec<f64> {
    let k = posts[0].n_states();
    let n = posts.len() as f64;
    let mut pi = vec![0.0; k];
    for post in posts {
        for (s, p) in pi.iter_mut().enumerate() {
            *p += post.zeta[(0, s)];
        }
    }
    for p in &mut pi {
        *p /= n;
    }
    // rounding drift
    let s: f64 = pi.iter().sum();
    for p in &mut pi {
        *p /= s;
    }
    pi
}

#[derive(Debug, Clone, PartialEq)]
pub struct GammaUpdate {
    pub gamma: DMatrix<f64>,
    /// Rows whose expected visit count was zero; these were set to uniform.
    pub degenerate_rows: Vec<usize>,
}

/// `Γ_{kℓ} = Σ ξ_{kℓt} / Σ_{t<T} ζ_{kt}`, rows renormalized.
pub fn m_step_gamma(posts: &[StatePosterior]) -> GammaUpdate {
    let k = posts[0].n_states();
    let mut num = DMatrix::<f64>::zeros(k, k);
    let mut den = vec![0.0; k];
    for post in posts {
        for (t, xi) in post.xi.iter().enumerate() {
            num += xi;
            for (s, d) in den.iter_mut().enumerate() {
                *d += post.zeta[(t, s)];
            }
        }
    }
    let mut gamma = DMatrix::zeros(k, k);
    let mut degenerate_rows = Vec::new();
    for a in 0..k {
        let row_mass: f64 = num.row(a).sum();
        if !(den[a] > 0.0) || !(row_mass > 1e-300) {
            degenerate_rows.push(a);
            gamma.row_mut(a).fill(1.0 / k as f64);
            continue;
        }
        for b in 0..k {
            gamma[(a, b)] = num[(a, b)] / den[a];
        }
        let s = gamma.row(a).sum();
        for b in 0..k {
            gamma[(a, b)] /= s;
        }
    }
    GammaUpdate { gamma, degenerate_rows }
}

/// `Σ = (1/n) Σ_i (Ω_i + ν_i ν_iᵀ)`.
pub fn m_step_sigma(qs: &[QFactor]) -> DMatrix<f64> {
    let d = qs[0].dim();
    let mut acc = DMatrix::zeros(d, d);
    for q in qs {
        acc += q.second_moment();
    }
    symmetrized(acc / qs.len() as f64)
}

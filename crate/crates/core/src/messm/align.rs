use nalgebra::{DMatrix, DVector};

use super::{unvecl, MessmParams, SubjectEffects};
use crate::kalman::SmootherMoments;

fn flip_sym(m: &mut DMatrix<f64>, s: &[f64]) {
    for a in 0..m.nrows() {
        for b in 0..m.ncols() {
            m[(a, b)] *= s[a] * s[b];
        }
    }
}

fn flip_vec(v: &mut DVector<f64>, s: &[f64]) {
    for (x, sign) in v.iter_mut().zip(s) {
        *x *= sign;
    }
}

fn sign_vectors(signs: &[f64], p: usize) -> (Vec<f64>, Vec<f64>) {
    let q = signs.len();
    let s_h = (0..q).flat_map(|c| std::iter::repeat(signs[c]).take(p - c)).collect();
    let s_g = (0..q * q).map(|i| signs[i % q] * signs[i / q]).collect();
    (s_h, s_g)
}

/// Reflection `D = diag(signs)` applied to one subject's factors and anchors.
pub fn flip_effects(signs: &[f64], effects: &mut SubjectEffects, p: usize) {
    let (s_h, s_g) = sign_vectors(signs, p);
    flip_vec(&mut effects.q_h.nu, &s_h);
    flip_sym(&mut effects.q_h.omega, &s_h);
    flip_vec(&mut effects.h0, &s_h);
    flip_vec(&mut effects.q_g.nu, &s_g);
    flip_sym(&mut effects.q_g.omega, &s_g);
    flip_vec(&mut effects.g0, &s_g);
}

/// Reflection applied to the population parameters, including `m0`, `P0`.
pub fn flip_params(signs: &[f64], params: &mut MessmParams) {
    let (s_h, s_g) = sign_vectors(signs, params.obs_dim());
    flip_vec(&mut params.mu_h, &s_h);
    flip_sym(&mut params.sigma_h, &s_h);
    flip_vec(&mut params.mu_g, &s_g);
    flip_sym(&mut params.sigma_g, &s_g);
    flip_vec(&mut params.m0, signs);
    flip_sym(&mut params.p0, signs);
}

/// Applies the latent-coordinate reflection `D = diag(signs)`:
/// `H → H D`, `G → D G D`, `U_t → D U_t`.
pub fn flip_state_coordinates(signs: &[f64], effects: &mut SubjectEffects, moments: &mut SmootherMoments, p: usize) {
    flip_effects(signs, effects, p);
    for m in &mut moments.m_hat {
        flip_vec(m, signs);
    }
    for m in moments.p_hat.iter_mut().chain(&mut moments.p_lag).chain(&mut moments.q_hat).chain(&mut moments.q_lag) {
        flip_sym(m, signs);
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AlignOutcome {
    pub flipped: Vec<usize>,
    /// Columns left alone because one of the two vectors had zero norm.
    pub skipped: Vec<usize>,
}

/// Flips every latent coordinate whose subject loading column `H̄_i[:, c]`
/// has negative cosine with the group column `group_h[:, c]`.
pub fn sign_align(group_h: &DMatrix<f64>, effects: &mut SubjectEffects, moments: &mut SmootherMoments) -> AlignOutcome {
    let (p, q) = group_h.shape();
    let hbar = unvecl(&effects.q_h.nu, p, q);
    let mut out = AlignOutcome::default();
    let mut signs = vec![1.0; q];
    for c in 0..q {
        let (a, b) = (hbar.column(c), group_h.column(c));
        if a.norm() == 0.0 || b.norm() == 0.0 {
            out.skipped.push(c);
            continue;
        }
        if a.dot(&b) < 0.0 {
            signs[c] = -1.0;
            out.flipped.push(c);
        }
    }
    if !out.flipped.is_empty() {
        flip_state_coordinates(&signs, effects, moments, p);
    }
    out
}

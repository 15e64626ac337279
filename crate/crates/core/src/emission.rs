//! Emission densities for mixed HMMs: log-density in the subject effect `f`
//! plus its gradient and Hessian, and the model-specific M-step.
//!
//! The [`Step`] argument carries the observed history `D_{1:t-1}` so that
//! history-dependent emissions fit the same contract; the Gaussian and
//! Bernoulli models here only look at the current row.

use nalgebra::{DMatrix, DVector};

use crate::data::{Sequence, Step};
use crate::error::{AvemError, Result};
use crate::factor::QFactor;
use crate::quadrature::GaussHermite;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Subject-level posterior over the random effect, as seen by an M-step.
#[derive(Debug, Clone, Copy)]
pub enum EffectPosterior<'a> {
    /// AVEM: one `ζ` (at the anchor) and a Gaussian factor.
    Variational { zeta: &'a DMatrix<f64>, q: &'a QFactor },
    /// Node-based exact EM: normalized weights, nodes and node-wise `ζ`.
    Mixture { weights: &'a [f64], nodes: &'a [DVector<f64>], zetas: &'a [DMatrix<f64>] },
}

pub trait EmissionModel: Clone + Send + Sync + std::fmt::Debug {
    fn n_states(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn effect_dim(&self) -> usize;

    fn log_density(&self, state: usize, effect: &[f64], step: Step<'_>) -> f64;
    fn grad_effect(&self, state: usize, effect: &[f64], step: Step<'_>, out: &mut [f64]);
    fn hess_effect(&self, state: usize, effect: &[f64], step: Step<'_>, out: &mut DMatrix<f64>);

    fn has_closed_form_gaussian(&self) -> bool {
        self.as_gaussian().is_some()
    }

    fn as_gaussian(&self) -> Option<&GaussianEmission> {
        None
    }

    /// `T × K` matrix of `E_q[log e_{kt}(f)]`; Gauss–Hermite over `q` unless
    /// the model overrides it with a closed form.
    fn expected_log_emissions(&self, seq: &Sequence, q: &QFactor, rule: &GaussHermite) -> Result<DMatrix<f64>> {
        let (nodes, weights) = rule.gaussian_nodes(&q.nu, &q.omega)?;
        let k = self.n_states();
        let mut out = DMatrix::zeros(seq.len(), k);
        for t in 0..seq.len() {
            let step = seq.step(t);
            for s in 0..k {
                out[(t, s)] = nodes
                    .iter()
                    .zip(&weights)
                    .map(|(f, w)| w * self.log_density(s, f.as_slice(), step))
                    .sum();
            }
        }
        Ok(out)
    }

    fn m_step(&self, data: &[Sequence], posteriors: &[EffectPosterior<'_>], rule: &GaussHermite) -> Result<Self>;

    /// Sort key for label alignment (larger first).
    fn state_order_key(&self, state: usize) -> f64;
    fn permute_states(&self, perm: &[usize]) -> Self;

    fn check_sequence(&self, seq: &Sequence) -> Result<()> {
        if seq.obs_dim() != self.obs_dim() {
            return Err(AvemError::DimensionMismatch {
                what: "observation dimension",
                expected: self.obs_dim(),
                found: seq.obs_dim(),
            });
        }
        Ok(())
    }
}

/// `D_t | U_t = k, f ~ N(μ_k + f, σ_k² I_p)`, effect dimension `d = p`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianEmission {
    /// `K × p`, row k is `μ_k`.
    pub mu: DMatrix<f64>,
    pub sigma2: Vec<f64>,
}

impl GaussianEmission {
    pub fn new(mu: DMatrix<f64>, sigma2: Vec<f64>) -> Result<Self> {
        if mu.nrows() != sigma2.len() {
            return Err(AvemError::DimensionMismatch { what: "state variances", expected: mu.nrows(), found: sigma2.len() });
        }
        if sigma2.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(AvemError::InvalidParameter("emission variances must be positive".into()));
        }
        Ok(Self { mu, sigma2 })
    }

    /// Squared residual `‖D − μ_k − f‖²`.
    fn sq_resid(&self, state: usize, effect: &[f64], obs: &[f64]) -> f64 {
        obs.iter()
            .enumerate()
            .map(|(j, y)| {
                let r = y - self.mu[(state, j)] - effect[j];
                r * r
            })
            .sum()
    }
}

/// Log-density of the Gaussian emission; `effect` must have length `p`.
pub fn gaussian_log_e(state: usize, effect: &[f64], obs: &[f64], params: &GaussianEmission) -> Result<f64> {
    if effect.len() != obs.len() || obs.len() != params.mu.ncols() {
        return Err(AvemError::DimensionMismatch { what: "Gaussian emission", expected: params.mu.ncols(), found: effect.len() });
    }
    let s2 = params.sigma2[state];
    let p = obs.len() as f64;
    Ok(-0.5 * p * (LN_2PI + s2.ln()) - params.sq_resid(state, effect, obs) / (2.0 * s2))
}

impl EmissionModel for GaussianEmission {
    fn n_states(&self) -> usize {
        self.mu.nrows()
    }

    fn obs_dim(&self) -> usize {
        self.mu.ncols()
    }

    fn effect_dim(&self) -> usize {
        self.mu.ncols()
    }

    fn log_density(&self, state: usize, effect: &[f64], step: Step<'_>) -> f64 {
        let s2 = self.sigma2[state];
        let p = step.obs.len() as f64;
        -0.5 * p * (LN_2PI + s2.ln()) - self.sq_resid(state, effect, step.obs) / (2.0 * s2)
    }

    fn grad_effect(&self, state: usize, effect: &[f64], step: Step<'_>, out: &mut [f64]) {
        let s2 = self.sigma2[state];
        for (j, g) in out.iter_mut().enumerate() {
            *g = (step.obs[j] - self.mu[(state, j)] - effect[j]) / s2;
        }
    }

    fn hess_effect(&self, state: usize, _effect: &[f64], _step: Step<'_>, out: &mut DMatrix<f64>) {
        out.fill(0.0);
        out.fill_diagonal(-1.0 / self.sigma2[state]);
    }

    fn as_gaussian(&self) -> Option<&GaussianEmission> {
        Some(self)
    }

    fn expected_log_emissions(&self, seq: &Sequence, q: &QFactor, _rule: &GaussHermite) -> Result<DMatrix<f64>> {
        let tr = q.omega.trace();
        let p = self.obs_dim() as f64;
        Ok(DMatrix::from_fn(seq.len(), self.n_states(), |t, s| {
            let s2 = self.sigma2[s];
            -0.5 * p * (LN_2PI + s2.ln()) - (self.sq_resid(s, q.nu.as_slice(), seq.row(t)) + tr) / (2.0 * s2)
        }))
    }

    fn m_step(&self, data: &[Sequence], posteriors: &[EffectPosterior<'_>], _rule: &GaussHermite) -> Result<Self> {
        let (k, p) = (self.n_states(), self.obs_dim());
        let mut num = DMatrix::<f64>::zeros(k, p);
        let mut den = vec![0.0; k];
        for (seq, post) in data.iter().zip(posteriors) {
            match *post {
                EffectPosterior::Variational { zeta, q } => {
                    for t in 0..seq.len() {
                        let y = seq.row(t);
                        for s in 0..k {
                            let z = zeta[(t, s)];
                            den[s] += z;
                            for j in 0..p {
                                num[(s, j)] += z * (y[j] - q.nu[j]);
                            }
                        }
                    }
                }
                EffectPosterior::Mixture { weights, nodes, zetas } => {
                    for ((w, f), zeta) in weights.iter().zip(nodes).zip(zetas) {
                        for t in 0..seq.len() {
                            let y = seq.row(t);
                            for s in 0..k {
                                let z = w * zeta[(t, s)];
                                den[s] += z;
                                for j in 0..p {
                                    num[(s, j)] += z * (y[j] - f[j]);
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut mu = self.mu.clone();
        for s in 0..k {
            if den[s] > 0.0 {
                for j in 0..p {
                    mu[(s, j)] = num[(s, j)] / den[s];
                }
            }
        }
        let next = GaussianEmission { mu, sigma2: self.sigma2.clone() };

        let mut ss = vec![0.0; k];
        for (seq, post) in data.iter().zip(posteriors) {
            match *post {
                EffectPosterior::Variational { zeta, q } => {
                    let tr = q.omega.trace();
                    for t in 0..seq.len() {
                        let y = seq.row(t);
                        for s in 0..k {
                            ss[s] += zeta[(t, s)] * (next.sq_resid(s, q.nu.as_slice(), y) + tr);
                        }
                    }
                }
                EffectPosterior::Mixture { weights, nodes, zetas } => {
                    for ((w, f), zeta) in weights.iter().zip(nodes).zip(zetas) {
                        for t in 0..seq.len() {
                            let y = seq.row(t);
                            for s in 0..k {
                                ss[s] += w * zeta[(t, s)] * next.sq_resid(s, f.as_slice(), y);
                            }
                        }
                    }
                }
            }
        }
        let mut sigma2 = self.sigma2.clone();
        for s in 0..k {
            if den[s] > 0.0 {
                sigma2[s] = ss[s] / (p as f64 * den[s]);
            }
        }
        Ok(GaussianEmission { mu: next.mu, sigma2 })
    }

    fn state_order_key(&self, state: usize) -> f64 {
        self.mu[(state, 0)]
    }

    fn permute_states(&self, perm: &[usize]) -> Self {
        let mu = DMatrix::from_fn(self.mu.nrows(), self.mu.ncols(), |s, j| self.mu[(perm[s], j)]);
        let sigma2 = perm.iter().map(|&s| self.sigma2[s]).collect();
        Self { mu, sigma2 }
    }
}

/// Numerically safe `log(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `Y_t | U_t = k, f ~ Bernoulli(logistic(β_k + f))` with scalar `f`.
#[derive(Debug, Clone, PartialEq)]
pub struct BernoulliEmission {
    pub beta: Vec<f64>,
}

impl BernoulliEmission {
    pub fn new(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|b| !b.is_finite()) {
            return Err(AvemError::InvalidParameter("logit intercepts must be finite".into()));
        }
        Ok(Self { beta })
    }
}

/// `y η − log(1 + e^η)` with `η = β_k + f`.
pub fn bernoulli_log_e(state: usize, effect: f64, y: f64, params: &BernoulliEmission) -> f64 {
    let eta = params.beta[state] + effect;
    if y >= 0.5 {
        -softplus(-eta)
    } else {
        -softplus(eta)
    }
}

impl EmissionModel for BernoulliEmission {
    fn n_states(&self) -> usize {
        self.beta.len()
    }

    fn obs_dim(&self) -> usize {
        1
    }

    fn effect_dim(&self) -> usize {
        1
    }

    fn log_density(&self, state: usize, effect: &[f64], step: Step<'_>) -> f64 {
        bernoulli_log_e(state, effect[0], step.obs[0], self)
    }

    fn grad_effect(&self, state: usize, effect: &[f64], step: Step<'_>, out: &mut [f64]) {
        out[0] = step.obs[0] - logistic(self.beta[state] + effect[0]);
    }

    fn hess_effect(&self, state: usize, effect: &[f64], _step: Step<'_>, out: &mut DMatrix<f64>) {
        let p = logistic(self.beta[state] + effect[0]);
        out[(0, 0)] = -p * (1.0 - p);
    }

    fn check_sequence(&self, seq: &Sequence) -> Result<()> {
        if seq.obs_dim() != 1 {
            return Err(AvemError::DimensionMismatch { what: "binary observation dimension", expected: 1, found: seq.obs_dim() });
        }
        if seq.values().iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(AvemError::InvalidParameter("binary observations must be 0 or 1".into()));
        }
        Ok(())
    }

    fn m_step(&self, data: &[Sequence], posteriors: &[EffectPosterior<'_>], rule: &GaussHermite) -> Result<Self> {
        let k = self.n_states();
        // per state: (weight, effect, Σ_t ζ y, Σ_t ζ)
        let mut terms: Vec<Vec<(f64, f64, f64, f64)>> = vec![Vec::new(); k];
        let mut push = |seq: &Sequence, w: f64, f: f64, zeta: &DMatrix<f64>| {
            for (s, bucket) in terms.iter_mut().enumerate() {
                let (mut a, mut b) = (0.0, 0.0);
                for t in 0..seq.len() {
                    a += zeta[(t, s)] * seq.row(t)[0];
                    b += zeta[(t, s)];
                }
                bucket.push((w, f, a, b));
            }
        };
        for (seq, post) in data.iter().zip(posteriors) {
            match *post {
                EffectPosterior::Variational { zeta, q } => {
                    let (nodes, weights) = rule.gaussian_nodes(&q.nu, &q.omega)?;
                    for (f, w) in nodes.iter().zip(weights) {
                        push(seq, w, f[0], zeta);
                    }
                }
                EffectPosterior::Mixture { weights, nodes, zetas } => {
                    for ((w, f), zeta) in weights.iter().zip(nodes).zip(zetas) {
                        push(seq, *w, f[0], zeta);
                    }
                }
            }
        }
        let mut beta = self.beta.clone();
        for (s, bucket) in terms.iter().enumerate() {
            beta[s] = maximize_logit_intercept(self.beta[s], bucket)?;
        }
        Ok(Self { beta })
    }

    fn state_order_key(&self, state: usize) -> f64 {
        self.beta[state]
    }

    fn permute_states(&self, perm: &[usize]) -> Self {
        Self { beta: perm.iter().map(|&s| self.beta[s]).collect() }
    }
}

/// Gradient of `Σ w [a (β + f) − b softplus(β + f)]` in `β`.
pub fn logit_intercept_gradient(beta: f64, terms: &[(f64, f64, f64, f64)]) -> f64 {
    terms.iter().map(|&(w, f, a, b)| w * (a - b * logistic(beta + f))).sum()
}

fn logit_intercept_objective(beta: f64, terms: &[(f64, f64, f64, f64)]) -> f64 {
    terms.iter().map(|&(w, f, a, b)| w * (a * (beta + f) - b * softplus(beta + f))).sum()
}

/// 1-D damped Newton for one logit intercept.
fn maximize_logit_intercept(start: f64, terms: &[(f64, f64, f64, f64)]) -> Result<f64> {
    let mass: f64 = terms.iter().map(|&(w, _, _, b)| w * b).sum();
    if mass <= 0.0 {
        return Ok(start);
    }
    let mut beta = start;
    let mut obj = logit_intercept_objective(beta, terms);
    for _ in 0..100 {
        let g = logit_intercept_gradient(beta, terms);
        if g.abs() < 1e-10 * mass.max(1.0) {
            return Ok(beta);
        }
        let h: f64 = terms
            .iter()
            .map(|&(w, f, _, b)| {
                let p = logistic(beta + f);
                -w * b * p * (1.0 - p)
            })
            .sum();
        let mut step = if h < 0.0 { -g / h } else { g.signum() };
        step = step.clamp(-5.0, 5.0);
        let mut accepted = false;
        for _ in 0..40 {
            let cand = beta + step;
            let cand_obj = logit_intercept_objective(cand, terms);
            if cand_obj >= obj {
                beta = cand;
                obj = cand_obj;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return Ok(beta);
        }
    }
    let g = logit_intercept_gradient(beta, terms);
    if g.abs() < 1e-6 * mass.max(1.0) {
        Ok(beta)
    } else {
        Err(AvemError::NoConvergence { what: "logit intercept update", iterations: 100 })
    }
}

//! Partially anchored variational EM for the localized-effect Gaussian MHMM
//! `Y_t | U_t = k ~ N(μ_k + f_a + f_b 1(t ≤ t0), σ_k²)`.
//!
//! `f_a` touches every observation and concentrates, so its state posterior
//! is anchored at the mean of `q(f_a)`. `f_b` only touches the first `t0`
//! steps and stays diffuse; its factor is kept on a prior-centered
//! Gauss–Hermite grid, with one forward–backward pass per node. Node-wise
//! state posteriors enter the `q(f_a)` update and the M-step weighted by the
//! grid weights.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::data::{total_steps, Sequence, Step};
use crate::emission::{EffectPosterior, EmissionModel, GaussianEmission};
use crate::error::{AvemError, Result};
use crate::factor::QFactor;
use crate::hmm::{forward_backward, posterior_entropy, ChainParams, LogEmissions, StatePosterior};
use crate::linalg::{logsumexp, spd_inverse};
use crate::mhmm::{
    align_states, chain_terms, check_data, closed_form_factor, init_gaussian, m_step_gamma, m_step_pi, m_step_sigma, AvemConfig,
    MhmmParams,
};
use crate::par;
use crate::quadrature::GaussHermite;
use crate::report::{push_warning, relative_change, FitReport, PassCounter};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Scalar Gaussian emission with effect `(f_a, f_b)`; `f_b` is active for
/// the first `t0` steps (zero-based `t < t0`).
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizedGaussianEmission {
    pub mu: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub t0: usize,
}

impl LocalizedGaussianEmission {
    pub fn new(mu: Vec<f64>, sigma2: Vec<f64>, t0: usize) -> Result<Self> {
        if mu.is_empty() || mu.len() != sigma2.len() {
            return Err(AvemError::DimensionMismatch { what: "state variances", expected: mu.len(), found: sigma2.len() });
        }
        if sigma2.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(AvemError::InvalidParameter("emission variances must be positive".into()));
        }
        Ok(Self { mu, sigma2, t0 })
    }

    fn active(&self, t: usize) -> f64 {
        if t < self.t0 {
            1.0
        } else {
            0.0
        }
    }

    fn resid(&self, state: usize, fa: f64, fb: f64, step: Step<'_>) -> f64 {
        step.obs[0] - self.mu[state] - fa - self.active(step.t) * fb
    }

    /// `Var(f_a + 1(t<t0) f_b)` under a 2-D factor.
    fn effect_var(&self, t: usize, omega: &DMatrix<f64>) -> f64 {
        let a = self.active(t);
        omega[(0, 0)] + a * (2.0 * omega[(0, 1)] + omega[(1, 1)])
    }
}

impl EmissionModel for LocalizedGaussianEmission {
    fn n_states(&self) -> usize {
        self.mu.len()
    }

    fn obs_dim(&self) -> usize {
        1
    }

    fn effect_dim(&self) -> usize {
        2
    }

    fn log_density(&self, state: usize, effect: &[f64], step: Step<'_>) -> f64 {
        let s2 = self.sigma2[state];
        let r = self.resid(state, effect[0], effect[1], step);
        -0.5 * (LN_2PI + s2.ln()) - r * r / (2.0 * s2)
    }

    fn grad_effect(&self, state: usize, effect: &[f64], step: Step<'_>, out: &mut [f64]) {
        let g = self.resid(state, effect[0], effect[1], step) / self.sigma2[state];
        out[0] = g;
        out[1] = self.active(step.t) * g;
    }

    fn hess_effect(&self, state: usize, _effect: &[f64], step: Step<'_>, out: &mut DMatrix<f64>) {
        let h = -1.0 / self.sigma2[state];
        let a = self.active(step.t);
        out[(0, 0)] = h;
        out[(0, 1)] = a * h;
        out[(1, 0)] = a * h;
        out[(1, 1)] = a * h;
    }

    fn expected_log_emissions(&self, seq: &Sequence, q: &QFactor, _rule: &GaussHermite) -> Result<DMatrix<f64>> {
        Ok(DMatrix::from_fn(seq.len(), self.n_states(), |t, s| {
            let s2 = self.sigma2[s];
            let r = self.resid(s, q.nu[0], q.nu[1], seq.step(t));
            -0.5 * (LN_2PI + s2.ln()) - (r * r + self.effect_var(t, &q.omega)) / (2.0 * s2)
        }))
    }

    fn m_step(&self, data: &[Sequence], posteriors: &[EffectPosterior<'_>], _rule: &GaussHermite) -> Result<Self> {
        let k = self.n_states();
        let mut num = vec![0.0; k];
        let mut den = vec![0.0; k];
        // visit every (weight, ζ, effect mean, effect covariance) combination
        let each = |f: &mut dyn FnMut(&Sequence, f64, &DMatrix<f64>, f64, f64, Option<&DMatrix<f64>>)| {
            for (seq, post) in data.iter().zip(posteriors) {
                match *post {
                    EffectPosterior::Variational { zeta, q } => f(seq, 1.0, zeta, q.nu[0], q.nu[1], Some(&q.omega)),
                    EffectPosterior::Mixture { weights, nodes, zetas } => {
                        for ((w, node), zeta) in weights.iter().zip(nodes).zip(zetas) {
                            f(seq, *w, zeta, node[0], node[1], None);
                        }
                    }
                }
            }
        };
        each(&mut |seq, w, zeta, fa, fb, _| {
            for t in 0..seq.len() {
                let y = seq.row(t)[0];
                for s in 0..k {
                    let z = w * zeta[(t, s)];
                    den[s] += z;
                    num[s] += z * (y - fa - self.active(t) * fb);
                }
            }
        });
        let mut mu = self.mu.clone();
        for s in 0..k {
            if den[s] > 0.0 {
                mu[s] = num[s] / den[s];
            }
        }
        let next = Self { mu, sigma2: self.sigma2.clone(), t0: self.t0 };
        let mut ss = vec![0.0; k];
        each(&mut |seq, w, zeta, fa, fb, omega| {
            for t in 0..seq.len() {
                let v = omega.map_or(0.0, |o| next.effect_var(t, o));
                for s in 0..k {
                    let r = next.resid(s, fa, fb, seq.step(t));
                    ss[s] += w * zeta[(t, s)] * (r * r + v);
                }
            }
        });
        let mut sigma2 = self.sigma2.clone();
        for s in 0..k {
            if den[s] > 0.0 {
                sigma2[s] = ss[s] / den[s];
            }
        }
        Ok(Self { mu: next.mu, sigma2, t0: self.t0 })
    }

    fn state_order_key(&self, state: usize) -> f64 {
        self.mu[state]
    }

    fn permute_states(&self, perm: &[usize]) -> Self {
        Self {
            mu: perm.iter().map(|&s| self.mu[s]).collect(),
            sigma2: perm.iter().map(|&s| self.sigma2[s]).collect(),
            t0: self.t0,
        }
    }

    fn check_sequence(&self, seq: &Sequence) -> Result<()> {
        if seq.obs_dim() != 1 {
            return Err(AvemError::DimensionMismatch { what: "localized observation dimension", expected: 1, found: seq.obs_dim() });
        }
        if self.t0 > seq.len() {
            return Err(AvemError::InvalidParameter(format!("t0 = {} exceeds sequence length {}", self.t0, seq.len())));
        }
        Ok(())
    }
}

/// Discrete factor over `f_b`: grid nodes with normalized posterior weights
/// and the prior quadrature weights they were built from.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFactor {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub prior_weights: Vec<f64>,
}

impl GridFactor {
    pub fn mean(&self) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(b, w)| w * b).sum()
    }

    pub fn second_moment(&self) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(b, w)| w * b * b).sum()
    }

    /// `Σ_j w_j log(w_j / v_j)`.
    pub fn kl_to_prior(&self) -> f64 {
        self.weights
            .iter()
            .zip(&self.prior_weights)
            .filter(|(w, _)| **w > 0.0)
            .map(|(w, v)| w * (w / v).ln())
            .sum()
    }
}

/// Parameters of the localized model: the scalar Gaussian MHMM part with
/// `Σ = [τ_a²]`, plus the prior variance of `f_b` and the cutoff.
#[derive(Debug, Clone, PartialEq)]
pub struct PavemParams {
    pub base: MhmmParams<GaussianEmission>,
    pub tau_b2: f64,
    pub t0: usize,
}

impl PavemParams {
    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.base.emission.obs_dim() != 1 {
            return Err(AvemError::DimensionMismatch { what: "localized observation dimension", expected: 1, found: self.base.emission.obs_dim() });
        }
        if !(self.tau_b2 >= 0.0 && self.tau_b2.is_finite()) {
            return Err(AvemError::InvalidParameter("tau_b2 must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// The same model seen as a two-effect emission, `Σ = diag(τ_a², τ_b²)`.
    pub fn to_fully_anchored(&self) -> Result<MhmmParams<LocalizedGaussianEmission>> {
        let e = &self.base.emission;
        let emission = LocalizedGaussianEmission::new(e.mu.column(0).iter().copied().collect(), e.sigma2.clone(), self.t0)?;
        let sigma = DMatrix::from_diagonal(&DVector::from_vec(vec![self.base.sigma[(0, 0)], self.tau_b2]));
        MhmmParams::new(self.base.chain.clone(), emission, sigma)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PavemFactor {
    pub q_a: QFactor,
    pub grid: GridFactor,
}

pub type PavemFit = FitReport<PavemParams, PavemFactor>;

/// k-means start for the scalar part and `τ_a² = τ_b² = 1`.
pub fn init_pavem(data: &[Sequence], k: usize, t0: usize) -> Result<PavemParams> {
    let base = init_gaussian(data, k)?;
    let p = PavemParams { base, tau_b2: 1.0, t0 };
    p.validate()?;
    Ok(p)
}

fn shift(t: usize, t0: usize, b: f64) -> f64 {
    if t < t0 {
        b
    } else {
        0.0
    }
}

/// Prior-centered grid: `b_j = τ_b z_j` with Gauss–Hermite `(z_j, v_j)`.
fn prior_grid(rule: &GaussHermite, tau_b2: f64) -> (Vec<f64>, Vec<f64>) {
    let tau = tau_b2.sqrt();
    (rule.nodes.iter().map(|z| tau * z).collect(), rule.weights.clone())
}

fn log_emissions_localized(g: &GaussianEmission, seq: &Sequence, fa: f64, b: f64, t0: usize) -> Result<LogEmissions> {
    if !(fa.is_finite() && b.is_finite()) {
        return Err(AvemError::NonFinite("anchor".into()));
    }
    LogEmissions::from_fn(seq.len(), g.n_states(), |t, k| g.log_density(k, &[fa + shift(t, t0, b)], seq.step(t)))
}

struct NodePosteriors {
    grid: GridFactor,
    /// `None` where the likelihood vanishes at that node.
    posts: Vec<Option<StatePosterior>>,
}

fn node_posteriors(params: &PavemParams, seq: &Sequence, fa: f64, rule: &GaussHermite, subject: usize) -> Result<NodePosteriors> {
    let (nodes, prior) = prior_grid(rule, params.tau_b2);
    let v_total: f64 = prior.iter().sum();
    let prior: Vec<f64> = prior.iter().map(|v| v / v_total).collect();
    let mut posts = Vec::with_capacity(nodes.len());
    let mut log_w = Vec::with_capacity(nodes.len());
    for (b, v) in nodes.iter().zip(&prior) {
        let le = log_emissions_localized(&params.base.emission, seq, fa, *b, params.t0)?;
        match forward_backward(&le, &params.base.chain) {
            Ok(p) => {
                log_w.push(v.ln() + p.log_marginal);
                posts.push(Some(p));
            }
            Err(AvemError::DegenerateLikelihood) => {
                log_w.push(f64::NEG_INFINITY);
                posts.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    let lse = logsumexp(&log_w);
    if !lse.is_finite() {
        return Err(AvemError::EmptyPosterior { subject, hint: "no grid node explains the data; check tau_b2 and the node count" });
    }
    let weights = log_w.iter().map(|l| (l - lse).exp()).collect();
    Ok(NodePosteriors { grid: GridFactor { nodes, weights, prior_weights: prior }, posts })
}

/// `q(f_b) ∝ p(D | f0_a, f_b) p(f_b)` on a `j`-node prior grid.
pub fn update_grid_factor(params: &PavemParams, seq: &Sequence, f0_a: f64, j: usize) -> Result<GridFactor> {
    params.validate()?;
    let rule = GaussHermite::new(j)?;
    Ok(node_posteriors(params, seq, f0_a, &rule, 0)?.grid)
}

/// Closed-form `q(f_a)` from node-wise state posteriors and residuals.
fn update_q_a(params: &PavemParams, seq: &Sequence, np: &NodePosteriors, sigma_inv: &DMatrix<f64>) -> Result<QFactor> {
    let g = &params.base.emission;
    let mut prec_scalar = 0.0;
    let mut b = DVector::zeros(1);
    for ((w, node), post) in np.grid.weights.iter().zip(&np.grid.nodes).zip(&np.posts) {
        let Some(post) = post else { continue };
        for t in 0..seq.len() {
            let y = seq.row(t);
            let sh = shift(t, params.t0, *node);
            for k in 0..g.n_states() {
                let s = (w * post.zeta[(t, k)]) / g.sigma2[k];
                prec_scalar += s;
                b[0] += s * ((y[0] - g.mu[(k, 0)]) - sh);
            }
        }
    }
    closed_form_factor(sigma_inv, prec_scalar, &b)
}

/// Grid-averaged `ζ̄`, `ξ̄`.
fn mixture_posterior(np: &NodePosteriors, t_len: usize, k: usize) -> StatePosterior {
    let mut zeta = DMatrix::zeros(t_len, k);
    let mut xi = vec![DMatrix::zeros(k, k); t_len.saturating_sub(1)];
    let mut log_marginal = 0.0;
    for (w, post) in np.grid.weights.iter().zip(&np.posts) {
        let Some(post) = post else { continue };
        zeta += *w * &post.zeta;
        for (acc, x) in xi.iter_mut().zip(&post.xi) {
            *acc += *w * x;
        }
        log_marginal += *w * post.log_marginal;
    }
    StatePosterior { zeta, xi, log_marginal }
}

fn m_step_emission(
    g: &GaussianEmission,
    data: &[Sequence],
    nps: &[NodePosteriors],
    factors: &[PavemFactor],
    t0: usize,
) -> GaussianEmission {
    let k = g.n_states();
    let mut num = DMatrix::<f64>::zeros(k, 1);
    let mut den = vec![0.0; k];
    for ((seq, np), fac) in data.iter().zip(nps).zip(factors) {
        for ((w, node), post) in np.grid.weights.iter().zip(&np.grid.nodes).zip(&np.posts) {
            let Some(post) = post else { continue };
            for t in 0..seq.len() {
                let y = seq.row(t);
                let e = fac.q_a.nu[0] + shift(t, t0, *node);
                for s in 0..k {
                    let z = w * post.zeta[(t, s)];
                    den[s] += z;
                    num[(s, 0)] += z * (y[0] - e);
                }
            }
        }
    }
    let mut mu = g.mu.clone();
    for s in 0..k {
        if den[s] > 0.0 {
            mu[(s, 0)] = num[(s, 0)] / den[s];
        }
    }
    let mut ss = vec![0.0; k];
    for ((seq, np), fac) in data.iter().zip(nps).zip(factors) {
        let tr = fac.q_a.omega[(0, 0)];
        for ((w, node), post) in np.grid.weights.iter().zip(&np.grid.nodes).zip(&np.posts) {
            let Some(post) = post else { continue };
            for t in 0..seq.len() {
                let y = seq.row(t);
                let e = fac.q_a.nu[0] + shift(t, t0, *node);
                for s in 0..k {
                    let r = y[0] - mu[(s, 0)] - e;
                    ss[s] += w * post.zeta[(t, s)] * (r * r + tr);
                }
            }
        }
    }
    let mut sigma2 = g.sigma2.clone();
    for s in 0..k {
        if den[s] > 0.0 {
            sigma2[s] = ss[s] / (1.0 * den[s]);
        }
    }
    GaussianEmission { mu, sigma2 }
}

/// Partially anchored ELBO of one subject.
fn subject_elbo(params: &PavemParams, seq: &Sequence, np: &NodePosteriors, fac: &PavemFactor) -> Result<f64> {
    let g = &params.base.emission;
    let tr = fac.q_a.omega[(0, 0)];
    let (mut emis, mut chain, mut ent) = (0.0, 0.0, 0.0);
    for ((w, node), post) in np.grid.weights.iter().zip(&np.grid.nodes).zip(&np.posts) {
        let Some(post) = post else { continue };
        let mut e_j = 0.0;
        for t in 0..seq.len() {
            let y = seq.row(t);
            let e = fac.q_a.nu[0] + shift(t, params.t0, *node);
            for s in 0..g.n_states() {
                let z = post.zeta[(t, s)];
                if z > 0.0 {
                    let s2 = g.sigma2[s];
                    let r = y[0] - g.mu[(s, 0)] - e;
                    let el = -0.5 * 1.0 * (LN_2PI + s2.ln()) - (r * r + tr) / (2.0 * s2);
                    e_j += z * el;
                }
            }
        }
        emis += w * e_j;
        chain += w * chain_terms(&params.base.chain, post);
        ent += w * posterior_entropy(post);
    }
    let kl = fac.q_a.kl_to(&DVector::zeros(1), &params.base.sigma)?;
    Ok(emis + chain - kl + ent - fac.grid.kl_to_prior())
}

/// Partially anchored variational EM with a `j`-node grid over `f_b`.
/// `config.e_step_method` and `config.n_quad` are not used; `sigma_fixed`
/// freezes both `τ_a²` and `τ_b²`.
pub fn fit_pavem(data: &[Sequence], init: &PavemParams, j: usize, config: &AvemConfig) -> Result<PavemFit> {
    let start = Instant::now();
    config.validate()?;
    init.validate()?;
    check_data(data, &init.base.emission)?;
    if data.iter().any(|s| init.t0 > s.len()) {
        return Err(AvemError::InvalidParameter("t0 exceeds a sequence length".into()));
    }
    let rule = GaussHermite::new(j)?;
    let counter = PassCounter::default();
    let n_states = init.base.chain.n_states();

    let mut params = init.clone();
    let (nodes0, prior0) = prior_grid(&rule, params.tau_b2);
    let mut factors: Vec<PavemFactor> = vec![
        PavemFactor {
            q_a: QFactor::prior(&params.base.sigma),
            grid: GridFactor { nodes: nodes0, weights: prior0.clone(), prior_weights: prior0 },
        };
        data.len()
    ];
    let mut anchors: Vec<DVector<f64>> = factors.iter().map(|f| f.q_a.nu.clone()).collect();
    let mut trace = Vec::new();
    let mut passes = Vec::new();
    let mut warnings = Vec::new();
    let mut converged = false;

    for iter in 0..config.max_iter {
        anchors = factors.iter().map(|f| f.q_a.nu.clone()).collect();
        let sigma_inv = spd_inverse(&params.base.sigma, "random-effect covariance")?;
        let step: Vec<(NodePosteriors, QFactor)> = par::try_map(config.parallelism, data, |i, seq| {
            let np = node_posteriors(&params, seq, anchors[i][0], &rule, i)?;
            counter.add(rule.len());
            let q_a = update_q_a(&params, seq, &np, &sigma_inv)?;
            Ok((np, q_a))
        })?;
        let mut nps = Vec::with_capacity(data.len());
        factors.clear();
        for (np, q_a) in step {
            factors.push(PavemFactor { q_a, grid: np.grid.clone() });
            nps.push(np);
        }

        let mixed: Vec<StatePosterior> =
            nps.iter().zip(data).map(|(np, seq)| mixture_posterior(np, seq.len(), n_states)).collect();
        let pi = m_step_pi(&mixed);
        let gamma = if mixed.iter().any(|p| !p.xi.is_empty()) {
            let g = m_step_gamma(&mixed);
            for r in &g.degenerate_rows {
                push_warning(&mut warnings, format!("transition row {r} had no expected visits; reset to uniform"));
            }
            g.gamma
        } else {
            params.base.chain.gamma.clone()
        };
        let emission = m_step_emission(&params.base.emission, data, &nps, &factors, params.t0);
        let (sigma, tau_b2) = if config.sigma_fixed {
            (params.base.sigma.clone(), params.tau_b2)
        } else {
            let qs: Vec<QFactor> = factors.iter().map(|f| f.q_a.clone()).collect();
            let tb = factors.iter().map(|f| f.grid.second_moment()).sum::<f64>() / data.len() as f64;
            (m_step_sigma(&qs), tb)
        };
        params = PavemParams { base: MhmmParams { chain: ChainParams { pi, gamma }, emission, sigma }, tau_b2, t0: params.t0 };

        let mut elbo = 0.0;
        for ((seq, np), fac) in data.iter().zip(&nps).zip(&factors) {
            elbo += subject_elbo(&params, seq, np, fac)?;
        }
        if !elbo.is_finite() {
            return Err(AvemError::NonFinite("anchored ELBO".into()));
        }
        passes.push(counter.take());
        trace.push(elbo);
        if iter >= 1 && relative_change(trace[iter - 1], elbo) < config.rel_tol {
            converged = true;
            break;
        }
    }

    let base = align_states(&params.base);
    Ok(FitReport {
        params: PavemParams { base, tau_b2: params.tau_b2, t0: params.t0 },
        q_factors: factors,
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

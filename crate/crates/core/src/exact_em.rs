//! Exact EM baselines for mixed HMMs: the random-effect integral is replaced
//! by a discrete distribution on Gauss–Hermite nodes (QEM) or prior Monte
//! Carlo draws (MCEM), with isotropic prior `f ~ N(0, τ² I)`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{total_steps, Sequence};
use crate::emission::{EffectPosterior, EmissionModel};
use crate::error::{AvemError, Result};
use crate::factor::QFactor;
use crate::hmm::{forward_backward, StatePosterior};
use crate::linalg::logsumexp;
use crate::mhmm::{align_states, check_data, log_emissions_at, m_step, MhmmFit, MhmmParams};
use crate::par::{self, Parallelism};
use crate::quadrature::GaussHermite;
use crate::report::{relative_change, FitReport, PassCounter};

const EMPTY_HINT: &str = "the node set misses the posterior mass; increase the number of nodes or the prior variance";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    GaussHermite,
    MonteCarlo,
}

/// Support points `f_j` (rows of `nodes`) with weights `v_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeSet {
    pub nodes: DMatrix<f64>,
    pub weights: Vec<f64>,
    pub kind: NodeKind,
}

impl NodeSet {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.nodes.ncols()
    }

    pub fn node(&self, j: usize) -> DVector<f64> {
        self.nodes.row(j).transpose()
    }
}

/// Tensor Gauss–Hermite rule for `N(0, τ² I_d)` with `J = j_per_dim^d` nodes.
pub fn gh_tensor_nodes(j_per_dim: usize, d: usize, tau2: f64) -> Result<NodeSet> {
    if d == 0 || !(tau2 >= 0.0 && tau2.is_finite()) {
        return Err(AvemError::InvalidParameter("need d >= 1 and finite tau2 >= 0".into()));
    }
    let (z, weights) = GaussHermite::new(j_per_dim)?.tensor(d)?;
    Ok(NodeSet { nodes: z * tau2.sqrt(), weights, kind: NodeKind::GaussHermite })
}

/// `m` prior draws from `N(0, τ² I_d)`, each with weight 1.
pub fn mc_nodes(rng: &mut ChaCha8Rng, m: usize, d: usize, tau2: f64) -> Result<NodeSet> {
    if m == 0 || d == 0 || !(tau2 >= 0.0 && tau2.is_finite()) {
        return Err(AvemError::InvalidParameter("need m, d >= 1 and finite tau2 >= 0".into()));
    }
    let tau = tau2.sqrt();
    let mut nodes = DMatrix::zeros(m, d);
    for r in 0..m {
        for c in 0..d {
            let z: f64 = StandardNormal.sample(rng);
            nodes[(r, c)] = tau * z;
        }
    }
    Ok(NodeSet { nodes, weights: vec![1.0; m], kind: NodeKind::MonteCarlo })
}

/// Normalized posterior weights `ŵ_ij`, one row per subject.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorWeights {
    pub w_hat: DMatrix<f64>,
    /// `log Σ_j v̄_j p(D_i | f_j)` with `v̄` the normalized node weights.
    pub log_lik: Vec<f64>,
}

/// One subject at every node: forward–backward results (`None` where the
/// likelihood vanishes) and normalized weights.
struct SubjectNodes {
    posts: Vec<Option<StatePosterior>>,
    weights: Vec<f64>,
    log_lik: f64,
}

fn subject_nodes<E: EmissionModel>(
    params: &MhmmParams<E>,
    seq: &Sequence,
    nodes: &NodeSet,
    subject: usize,
    keep: bool,
) -> Result<SubjectNodes> {
    let v_total: f64 = nodes.weights.iter().sum();
    let mut posts = Vec::with_capacity(if keep { nodes.len() } else { 0 });
    let mut log_w = Vec::with_capacity(nodes.len());
    for j in 0..nodes.len() {
        let le = log_emissions_at(&params.emission, seq, &nodes.node(j))?;
        match forward_backward(&le, &params.chain) {
            Ok(post) => {
                log_w.push((nodes.weights[j] / v_total).ln() + post.log_marginal);
                if keep {
                    posts.push(Some(post));
                }
            }
            Err(AvemError::DegenerateLikelihood) => {
                log_w.push(f64::NEG_INFINITY);
                if keep {
                    posts.push(None);
                }
            }
            Err(e) => return Err(e),
        }
    }
    let log_lik = logsumexp(&log_w);
    if !log_lik.is_finite() {
        return Err(AvemError::EmptyPosterior { subject, hint: EMPTY_HINT });
    }
    let weights = log_w.iter().map(|l| (l - log_lik).exp()).collect();
    Ok(SubjectNodes { posts, weights, log_lik })
}

/// `ŵ_ij ∝ v_j p(D_i | f_j; θ)`, normalized per row in log space.
pub fn posterior_weights<E: EmissionModel>(
    params: &MhmmParams<E>,
    data: &[Sequence],
    nodes: &NodeSet,
    parallelism: Parallelism,
) -> Result<PosteriorWeights> {
    if nodes.is_empty() || nodes.dim() != params.emission.effect_dim() {
        return Err(AvemError::DimensionMismatch { what: "node dimension", expected: params.emission.effect_dim(), found: nodes.dim() });
    }
    let rows = par::try_map(parallelism, data, |i, seq| subject_nodes(params, seq, nodes, i, false))?;
    let w_hat = DMatrix::from_fn(data.len(), nodes.len(), |i, j| rows[i].weights[j]);
    Ok(PosteriorWeights { w_hat, log_lik: rows.iter().map(|r| r.log_lik).collect() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExactEmConfig {
    pub max_iter: usize,
    /// Relative change of the node log-likelihood below which the loop stops.
    pub rel_tol: f64,
    /// Keep `τ²` (and therefore the nodes) at the initial value.
    pub fix_tau2: bool,
    /// Seed of the Monte Carlo draws.
    pub seed: u64,
    pub parallelism: Parallelism,
    /// Gauss–Hermite nodes handed to emission M-steps that integrate internally.
    pub n_quad: usize,
}

impl Default for ExactEmConfig {
    fn default() -> Self {
        Self { max_iter: 500, rel_tol: 1e-6, fix_tau2: false, seed: 0, parallelism: Parallelism::default(), n_quad: 9 }
    }
}

#[derive(Debug, Clone, Copy)]
enum Rule {
    Quadrature(usize),
    MonteCarlo(usize),
}

/// Gauss–Hermite exact EM with `j_per_dim` nodes per effect dimension.
pub fn fit_qem<E: EmissionModel>(data: &[Sequence], init: &MhmmParams<E>, j_per_dim: usize, config: &ExactEmConfig) -> Result<MhmmFit<E>> {
    fit_exact(data, init, Rule::Quadrature(j_per_dim), config)
}

/// Monte Carlo EM with `m` fresh prior draws per iteration.
pub fn fit_mcem<E: EmissionModel>(data: &[Sequence], init: &MhmmParams<E>, m: usize, config: &ExactEmConfig) -> Result<MhmmFit<E>> {
    fit_exact(data, init, Rule::MonteCarlo(m), config)
}

fn fit_exact<E: EmissionModel>(data: &[Sequence], init: &MhmmParams<E>, rule: Rule, config: &ExactEmConfig) -> Result<MhmmFit<E>> {
    let start = Instant::now();
    if config.max_iter == 0 || !(config.rel_tol > 0.0) {
        return Err(AvemError::InvalidParameter("max_iter and rel_tol must be positive".into()));
    }
    init.validate()?;
    check_data(data, &init.emission)?;
    let d = init.emission.effect_dim();
    let gh = GaussHermite::new(config.n_quad)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let counter = PassCounter::default();
    let n = data.len() as f64;

    let mut params = init.clone();
    let mut tau2 = params.sigma.trace() / d as f64;
    let mut trace = Vec::new();
    let mut passes = Vec::new();
    let mut warnings = Vec::new();
    let mut converged = false;
    let mut q_factors = Vec::new();

    for iter in 0..config.max_iter {
        let nodes = match rule {
            Rule::Quadrature(j) => gh_tensor_nodes(j, d, tau2)?,
            Rule::MonteCarlo(m) => mc_nodes(&mut rng, m, d, tau2)?,
        };
        let per_subject = par::try_map(config.parallelism, data, |i, seq| {
            let sn = subject_nodes(&params, seq, &nodes, i, true)?;
            counter.add(nodes.len());
            Ok(sn)
        })?;
        let log_lik: f64 = per_subject.iter().map(|s| s.log_lik).sum();
        if !log_lik.is_finite() {
            return Err(AvemError::NonFinite("node log-likelihood".into()));
        }

        // weighted averages ζ̄, ξ̄ and node-wise ζ for the emission M-step
        let node_list: Vec<DVector<f64>> = (0..nodes.len()).map(|j| nodes.node(j)).collect();
        let mut averaged = Vec::with_capacity(data.len());
        let mut zetas: Vec<Vec<DMatrix<f64>>> = Vec::with_capacity(data.len());
        for (seq, sn) in data.iter().zip(&per_subject) {
            let k = params.chain.n_states();
            let t_len = seq.len();
            let mut zeta_bar = DMatrix::zeros(t_len, k);
            let mut xi_bar = vec![DMatrix::zeros(k, k); t_len.saturating_sub(1)];
            let mut node_zetas = Vec::with_capacity(nodes.len());
            for (w, post) in sn.weights.iter().zip(&sn.posts) {
                match post {
                    Some(p) if *w > 0.0 => {
                        zeta_bar += *w * &p.zeta;
                        for (acc, x) in xi_bar.iter_mut().zip(&p.xi) {
                            *acc += *w * x;
                        }
                        node_zetas.push(p.zeta.clone());
                    }
                    Some(p) => node_zetas.push(p.zeta.clone()),
                    None => node_zetas.push(DMatrix::zeros(t_len, k)),
                }
            }
            averaged.push(StatePosterior { zeta: zeta_bar, xi: xi_bar, log_marginal: sn.log_lik });
            zetas.push(node_zetas);
        }

        q_factors = per_subject
            .iter()
            .map(|sn| {
                let mut mean = DVector::zeros(d);
                let mut second = DMatrix::zeros(d, d);
                for (w, f) in sn.weights.iter().zip(&node_list) {
                    mean += *w * f;
                    second += *w * f * f.transpose();
                }
                let omega = second - &mean * mean.transpose();
                QFactor { nu: mean, omega }
            })
            .collect();

        if !config.fix_tau2 {
            let mut acc = 0.0;
            for sn in &per_subject {
                for (w, f) in sn.weights.iter().zip(&node_list) {
                    acc += w * f.norm_squared();
                }
            }
            tau2 = acc / (n * d as f64);
        }

        let effect_posts: Vec<EffectPosterior<'_>> = per_subject
            .iter()
            .zip(&zetas)
            .map(|(sn, z)| EffectPosterior::Mixture { weights: &sn.weights, nodes: &node_list, zetas: z })
            .collect();
        let sigma = DMatrix::identity(d, d) * tau2;
        params = m_step(&params, data, &averaged, &effect_posts, Some(sigma), &gh, &mut warnings)?;

        passes.push(counter.take());
        trace.push(log_lik);
        if iter >= 1 && relative_change(trace[iter - 1], log_lik) < config.rel_tol {
            converged = true;
            break;
        }
    }

    Ok(FitReport {
        params: align_states(&params),
        q_factors,
        anchors: Vec::new(),
        n_iter: trace.len(),
        elbo_trace: trace,
        wall_time_seconds: start.elapsed().as_secs_f64(),
        passes_per_iter: passes,
        warnings,
        converged,
        total_steps: total_steps(data),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emission::GaussianEmission;
    use crate::hmm::ChainParams;

    #[test]
    fn single_node_at_zero() {
        let ns = gh_tensor_nodes(1, 1, 2.0).unwrap();
        assert_eq!(ns.len(), 1);
        assert!(ns.nodes[(0, 0)].abs() < 1e-15);
        assert!((ns.weights[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn three_nodes_second_moment() {
        let ns = gh_tensor_nodes(3, 1, 1.0).unwrap();
        let m2: f64 = (0..3).map(|j| ns.weights[j] * ns.nodes[(j, 0)].powi(2)).sum();
        assert!((m2 - 1.0).abs() < 1e-14);
    }

    #[test]
    fn tensor_moments() {
        let ns = gh_tensor_nodes(7, 2, 1.7).unwrap();
        assert_eq!(ns.len(), 49);
        let s: f64 = ns.weights.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        let mut m = DMatrix::zeros(2, 2);
        for j in 0..ns.len() {
            let f = ns.node(j);
            m += ns.weights[j] * &f * f.transpose();
        }
        assert!((m - DMatrix::identity(2, 2) * 1.7).abs().max() < 1e-10);
    }

    #[test]
    fn size_guard() {
        assert!(matches!(gh_tensor_nodes(40, 5, 1.0), Err(AvemError::SizeGuard(_))));
    }

    #[test]
    fn flat_likelihood_returns_prior_weights() {
        // σ² huge relative to the node spread: weights ≈ prior, exactly so
        // when all nodes coincide
        let params = MhmmParams::new(
            ChainParams::sticky(2, 0.9),
            GaussianEmission::new(DMatrix::from_row_slice(2, 1, &[1.0, -1.0]), vec![1.0, 1.0]).unwrap(),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let seq = Sequence::new(1, vec![0.3, -0.2, 1.1]).unwrap();
        let nodes = NodeSet { nodes: DMatrix::zeros(3, 1), weights: vec![1.0, 2.0, 1.0], kind: NodeKind::MonteCarlo };
        let pw = posterior_weights(&params, &[seq], &nodes, Parallelism::Sequential).unwrap();
        for (j, v) in [0.25, 0.5, 0.25].iter().enumerate() {
            assert!((pw.w_hat[(0, j)] - v).abs() < 1e-14);
        }
    }

    #[test]
    fn mc_weights_are_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ns = mc_nodes(&mut rng, 5, 2, 0.5).unwrap();
        assert!(ns.weights.iter().all(|w| *w == 1.0));
        assert_eq!(ns.nodes.shape(), (5, 2));
    }
}

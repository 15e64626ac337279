//! Brute-force reference computations and the validation suites built on
//! them: exhaustive path enumeration for HMM posteriors, dense joint-Gaussian
//! conditioning for the smoother, and dense 1-D grids for effect posteriors.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::Sequence;
use crate::emission::{EmissionModel, GaussianEmission};
use crate::error::{AvemError, Result};
use crate::exact_em::{gh_tensor_nodes, posterior_weights};
use crate::hmm::{forward_backward, ChainParams, LogEmissions, StatePosterior};
use crate::kalman::{dense_joint_oracle, smooth, LgssmSpec};
use crate::linalg::logsumexp;
use crate::mhmm::{log_emissions_at, update_q_closed_form, MhmmParams};
use crate::par::Parallelism;
use crate::partial::{update_grid_factor, PavemParams};

/// Exact `ζ`, `ξ` and `log p(D)` by summing over all `K^T` paths.
pub fn enumerate_paths(log_e: &LogEmissions, chain: &ChainParams) -> Result<StatePosterior> {
    let (t_len, k) = (log_e.n_steps(), log_e.n_states());
    let total = (k as u128).checked_pow(t_len as u32).filter(|&n| n <= 1_000_000);
    let total = total.ok_or_else(|| AvemError::SizeGuard(format!("{k}^{t_len} paths exceeds 1e6")))? as usize;
    let e = log_e.values();
    let mut log_joint = Vec::with_capacity(total);
    let mut paths = Vec::with_capacity(total);
    for idx in 0..total {
        let mut rem = idx;
        let path: Vec<usize> = (0..t_len)
            .map(|_| {
                let s = rem % k;
                rem /= k;
                s
            })
            .collect();
        let mut lj = chain.pi[path[0]].ln() + e[(0, path[0])];
        for t in 1..t_len {
            lj += chain.gamma[(path[t - 1], path[t])].ln() + e[(t, path[t])];
        }
        log_joint.push(lj);
        paths.push(path);
    }
    let log_z = logsumexp(&log_joint);
    if !log_z.is_finite() {
        return Err(AvemError::DegenerateLikelihood);
    }
    let mut zeta = DMatrix::zeros(t_len, k);
    let mut xi = vec![DMatrix::zeros(k, k); t_len.saturating_sub(1)];
    for (path, lj) in paths.iter().zip(&log_joint) {
        let w = (lj - log_z).exp();
        for t in 0..t_len {
            zeta[(t, path[t])] += w;
            if t + 1 < t_len {
                xi[t][(path[t], path[t + 1])] += w;
            }
        }
    }
    Ok(StatePosterior { zeta, xi, log_marginal: log_z })
}

/// Mean and variance of the density `∝ exp(log_f)` by the trapezoid rule on
/// `n` equally spaced points of `[lo, hi]`, normalized in log space.
pub fn dense_grid_moments(log_f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> (f64, f64) {
    let h = (hi - lo) / (n - 1) as f64;
    let xs: Vec<f64> = (0..n).map(|i| lo + h * i as f64).collect();
    let mut lw: Vec<f64> = xs.iter().map(|&x| log_f(x)).collect();
    lw[0] -= std::f64::consts::LN_2;
    lw[n - 1] -= std::f64::consts::LN_2;
    let lz = logsumexp(&lw);
    let mut mean = 0.0;
    for (x, l) in xs.iter().zip(&lw) {
        mean += x * (l - lz).exp();
    }
    let mut var = 0.0;
    for (x, l) in xs.iter().zip(&lw) {
        var += (x - mean) * (x - mean) * (l - lz).exp();
    }
    (mean, var)
}

/// Outcome of one validation suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub instances: usize,
    pub max_deviation: f64,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.max_deviation < self.tolerance
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_chain(rng: &mut ChaCha8Rng, k: usize) -> ChainParams {
    let row = |rng: &mut ChaCha8Rng| {
        let v: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 0.05).collect();
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect::<Vec<_>>()
    };
    let pi = row(rng);
    let mut gamma = DMatrix::zeros(k, k);
    for a in 0..k {
        let r = row(rng);
        for b in 0..k {
            gamma[(a, b)] = r[b];
        }
    }
    ChainParams { pi, gamma }
}

fn max_dev(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Forward–backward against path enumeration: random `K ≤ 3`, `T ≤ 6`.
pub fn hmm_suite(instances: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let k = rng.random_range(1..=3);
        let t_len = rng.random_range(1..=6);
        let chain = random_chain(&mut rng, k);
        let le = LogEmissions::new(DMatrix::from_fn(t_len, k, |_, _| 2.0 * normal(&mut rng)))?;
        let fb = forward_backward(&le, &chain)?;
        let ex = enumerate_paths(&le, &chain)?;
        worst = worst.max(max_dev(&fb.zeta, &ex.zeta));
        for (a, b) in fb.xi.iter().zip(&ex.xi) {
            worst = worst.max(max_dev(a, b));
        }
        worst = worst.max((fb.log_marginal - ex.log_marginal).abs());
    }
    Ok(SuiteReport { name: "oracle-hmm", instances, max_deviation: worst, tolerance: 1e-10 })
}

/// RTS smoother against dense conditioning: `q = 2`, `p = 3`, `T = 5`.
pub fn kalman_suite(instances: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (q, p, t_len) = (2, 3, 5);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let a = DMatrix::from_fn(q, q, |_, _| normal(&mut rng));
        let spec = LgssmSpec {
            g: DMatrix::from_fn(q, q, |_, _| 0.5 * normal(&mut rng)),
            h: DMatrix::from_fn(p, q, |_, _| normal(&mut rng)),
            r: DVector::from_fn(p, |_, _| 0.2 + rng.random::<f64>()),
            m0: DVector::from_fn(q, |_, _| normal(&mut rng)),
            p0: &a * a.transpose() + DMatrix::identity(q, q) * 0.5,
        };
        let obs = DMatrix::from_fn(t_len, p, |_, _| 2.0 * normal(&mut rng));
        let sm = smooth(&spec, &obs)?;
        let (mean, cov) = dense_joint_oracle(&spec, &obs)?;
        for t in 0..t_len {
            let m = mean.rows(t * q, q);
            worst = worst.max((&sm.m_hat[t] - m).amax());
            let c = cov.view((t * q, t * q), (q, q)).into_owned();
            worst = worst.max(max_dev(&sm.p_hat[t], &c));
            if t > 0 {
                let lag = cov.view((t * q, (t - 1) * q), (q, q)).into_owned();
                worst = worst.max(max_dev(&sm.p_lag[t - 1], &lag));
            }
        }
    }
    Ok(SuiteReport { name: "oracle-kalman", instances, max_deviation: worst, tolerance: 1e-8 })
}

fn random_gaussian_instance(rng: &mut ChaCha8Rng, t_len: usize, tau2: f64, s2_min: f64) -> Result<(MhmmParams<GaussianEmission>, Sequence)> {
    let k = 2;
    let mu = DMatrix::from_row_slice(k, 1, &[1.0 + 0.5 * normal(rng), -1.0 + 0.5 * normal(rng)]);
    let sigma2 = vec![s2_min + rng.random::<f64>(), s2_min + rng.random::<f64>()];
    let params = MhmmParams::new(
        random_chain(rng, k),
        GaussianEmission::new(mu, sigma2)?,
        DMatrix::from_element(1, 1, tau2),
    )?;
    let f = tau2.sqrt() * normal(rng);
    let values = (0..t_len).map(|_| f + 1.5 * normal(rng)).collect();
    Ok((params, Sequence::new(1, values)?))
}

/// Closed-form Gaussian factor against a dense grid over
/// `exp(−f²/2τ² + Σ ζ log e(f))`, with random `ζ` rows.
pub fn gaussian_estep_suite(instances: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let t_len = rng.random_range(5..=30);
        let tau2 = 0.5 + rng.random::<f64>();
        let (params, seq) = random_gaussian_instance(&mut rng, t_len, tau2, 0.5)?;
        let mut zeta = DMatrix::zeros(t_len, 2);
        for t in 0..t_len {
            let a: f64 = rng.random();
            zeta[(t, 0)] = a;
            zeta[(t, 1)] = 1.0 - a;
        }
        let post = StatePosterior { zeta: zeta.clone(), xi: vec![], log_marginal: 0.0 };
        let q = update_q_closed_form(&params, &seq, &post)?;
        let em = &params.emission;
        let log_f = |f: f64| {
            let mut v = -f * f / (2.0 * tau2);
            for t in 0..t_len {
                for s in 0..2 {
                    v += zeta[(t, s)] * em.log_density(s, &[f], seq.step(t));
                }
            }
            v
        };
        let (m, var) = dense_grid_moments(log_f, -10.0, 10.0, 40_001);
        worst = worst.max((m - q.nu[0]).abs()).max((var - q.omega[(0, 0)]).abs());
    }
    Ok(SuiteReport { name: "oracle-estep", instances, max_deviation: worst, tolerance: 1e-6 })
}

/// Gauss–Hermite (J = 20) posterior mean of `f` against a dense grid over
/// `N(f; 0, τ²) p(D | f)`.
pub fn qem_weights_suite(instances: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let t_len = rng.random_range(2..=5);
        let tau2 = 0.25 + 0.75 * rng.random::<f64>();
        let (params, seq) = random_gaussian_instance(&mut rng, t_len, tau2, 0.5)?;
        let nodes = gh_tensor_nodes(20, 1, tau2)?;
        let pw = posterior_weights(&params, std::slice::from_ref(&seq), &nodes, Parallelism::Sequential)?;
        let gh_mean: f64 = (0..nodes.len()).map(|j| pw.w_hat[(0, j)] * nodes.nodes[(j, 0)]).sum();
        let log_f = |f: f64| {
            let le = log_emissions_at(&params.emission, &seq, &DVector::from_element(1, f));
            let ll = le.and_then(|le| forward_backward(&le, &params.chain)).map_or(f64::NEG_INFINITY, |p| p.log_marginal);
            -f * f / (2.0 * tau2) + ll
        };
        let half = 8.0 * tau2.sqrt();
        let (m, _) = dense_grid_moments(log_f, -half, half, 4001);
        worst = worst.max((m - gh_mean).abs());
    }
    Ok(SuiteReport { name: "oracle-qem", instances, max_deviation: worst, tolerance: 1e-3 })
}

/// PAVEM grid factor mean against a dense 1001-point grid over
/// `N(f_b; 0, τ_b²) p(D | f_a⁰, f_b)`. A 9-node prior-centered rule is only
/// accurate when the likelihood in `f_b` is flat next to the prior, hence
/// the short windows and noisy emissions here.
pub fn grid_factor_suite(instances: usize, seed: u64) -> Result<SuiteReport> {
    grid_factor_deviation(instances, seed, 9, 1, 1.5).map(|max_deviation| SuiteReport {
        name: "oracle-pavem",
        instances,
        max_deviation,
        tolerance: 1e-3,
    })
}

fn grid_factor_deviation(instances: usize, seed: u64, j: usize, t0_max: usize, s2_min: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let t_len = rng.random_range(10..=30);
        let t0 = rng.random_range(1..=t0_max);
        let tau_b2 = 0.5 + rng.random::<f64>();
        let (base, seq) = random_gaussian_instance(&mut rng, t_len, 1.0, s2_min)?;
        let params = PavemParams { base, tau_b2, t0 };
        let fa = 0.3 * normal(&mut rng);
        let gf = update_grid_factor(&params, &seq, fa, j)?;
        let em = &params.base.emission;
        let log_f = |b: f64| {
            let le = LogEmissions::from_fn(seq.len(), 2, |t, k| {
                let shift = if t < t0 { b } else { 0.0 };
                em.log_density(k, &[fa + shift], seq.step(t))
            });
            let ll = le.and_then(|le| forward_backward(&le, &params.base.chain)).map_or(f64::NEG_INFINITY, |p| p.log_marginal);
            -b * b / (2.0 * tau_b2) + ll
        };
        let half = 8.0 * tau_b2.sqrt();
        let (m, _) = dense_grid_moments(log_f, -half, half, 1001);
        worst = worst.max((m - gf.mean()).abs());
    }
    Ok(worst)
}

pub const SUITES: [&str; 5] = ["oracle-hmm", "oracle-kalman", "oracle-estep", "oracle-qem", "oracle-pavem"];

/// Runs a named suite, or every suite for `"all"`.
pub fn run_suite(name: &str, seed: u64) -> Result<Vec<SuiteReport>> {
    match name {
        "oracle-hmm" => Ok(vec![hmm_suite(100, seed)?]),
        "oracle-kalman" => Ok(vec![kalman_suite(50, seed)?]),
        "oracle-estep" => Ok(vec![gaussian_estep_suite(20, seed)?]),
        "oracle-qem" => Ok(vec![qem_weights_suite(10, seed)?]),
        "oracle-pavem" => Ok(vec![grid_factor_suite(10, seed)?]),
        "all" => SUITES.iter().map(|s| run_suite(s, seed).map(|mut v| v.remove(0))).collect(),
        other => Err(AvemError::InvalidParameter(format!("unknown suite '{other}'; expected one of {SUITES:?} or all"))),
    }
}

//! Ground-truth generators, replicate scoring and the Monte Carlo harness.

mod gen;
mod harness;
mod score;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use gen::{
    gen_bernoulli_mhmm, gen_gaussian_mhmm, gen_localized, gen_messm, generate, sample_markov_chain, BernoulliTruth, Dataset,
    GaussianTruth, LocalizedTruth, MessmTruth, Truth,
};
pub use harness::{cell_seed, check_methods, fit_method, run_monte_carlo, run_replicate, FitSettings, MethodSpec, ResultRow};
pub use score::{align_messm_signs, score, FittedModel, ReplicateResult};

use crate::error::{AvemError, Result};

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for stream `(replicate, subject)` under `master`. Streams that are not
/// tied to a subject use `subject = u64::MAX`.
pub fn derive_seed(master: u64, replicate: u64, subject: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ replicate) ^ subject)
}

pub fn rng_for(master: u64, replicate: u64, subject: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, replicate, subject))
}

/// Stationary law `π Γ = π` of an irreducible chain.
pub fn stationary_distribution(gamma: &DMatrix<f64>) -> Result<Vec<f64>> {
    let k = gamma.nrows();
    if k == 0 || gamma.ncols() != k {
        return Err(AvemError::InvalidParameter("transition matrix must be square and non-empty".into()));
    }
    for start in 0..k {
        let mut seen = vec![false; k];
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(a) = stack.pop() {
            for b in 0..k {
                if !seen[b] && gamma[(a, b)] > 0.0 {
                    seen[b] = true;
                    stack.push(b);
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(AvemError::Reducible);
        }
    }
    // (Γᵀ − I) π = 0 with the last equation replaced by Σ π = 1
    let mut a = gamma.transpose() - DMatrix::identity(k, k);
    a.row_mut(k - 1).fill(1.0);
    let mut b = nalgebra::DVector::zeros(k);
    b[k - 1] = 1.0;
    let pi = a.lu().solve(&b).ok_or_else(|| AvemError::Singular("stationary system".into()))?;
    Ok(pi.iter().copied().collect())
}

/// `K` means equally spaced from 1.5 down to −1.5.
pub fn default_ladder(k: usize) -> Vec<f64> {
    if k == 1 {
        return vec![0.0];
    }
    (0..k).map(|s| 1.5 - 3.0 * s as f64 / (k - 1) as f64).collect()
}

fn default_stickiness() -> f64 {
    0.92
}
fn default_sigma2() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianMhmmSpec {
    pub n: usize,
    pub t: usize,
    #[serde(default = "GaussianMhmmSpec::default_k")]
    pub k: usize,
    #[serde(default = "GaussianMhmmSpec::default_d")]
    pub d: usize,
    pub tau2: f64,
    #[serde(default = "default_stickiness")]
    pub stickiness: f64,
    #[serde(default = "default_sigma2")]
    pub sigma2: f64,
    /// State mean levels `a_k` (`μ_k = a_k 1_d`); defaults to the 1.5…−1.5 ladder.
    #[serde(default)]
    pub levels: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: u64,
}

impl GaussianMhmmSpec {
    fn default_k() -> usize {
        3
    }
    fn default_d() -> usize {
        2
    }

    pub fn new(n: usize, t: usize, k: usize, d: usize, tau2: f64) -> Self {
        Self { n, t, k, d, tau2, stickiness: 0.92, sigma2: 1.0, levels: None, seed: 0 }
    }

    pub fn levels(&self) -> Vec<f64> {
        self.levels.clone().unwrap_or_else(|| default_ladder(self.k))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BernoulliMhmmSpec {
    pub n: usize,
    pub t: usize,
    pub tau2: f64,
    #[serde(default = "BernoulliMhmmSpec::default_beta")]
    pub beta: Vec<f64>,
    #[serde(default = "default_stickiness")]
    pub stickiness: f64,
    #[serde(default)]
    pub seed: u64,
}

impl BernoulliMhmmSpec {
    fn default_beta() -> Vec<f64> {
        vec![-1.5, 1.5]
    }

    pub fn new(n: usize, t: usize, tau2: f64) -> Self {
        Self { n, t, tau2, beta: Self::default_beta(), stickiness: 0.92, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MessmSpec {
    pub n: usize,
    pub t: usize,
    /// Row-major `q × q` population transition matrix.
    #[serde(default = "MessmSpec::default_g")]
    pub g: Vec<Vec<f64>>,
    /// Row-major `p × q` lower-trapezoidal population loading.
    #[serde(default = "MessmSpec::default_h")]
    pub h: Vec<Vec<f64>>,
    #[serde(default = "MessmSpec::default_r")]
    pub r: f64,
    #[serde(default = "MessmSpec::default_sigma")]
    pub sigma_g: f64,
    #[serde(default = "MessmSpec::default_sigma")]
    pub sigma_h: f64,
    /// Redraw `G_i` until its spectral radius is below one.
    #[serde(default = "MessmSpec::default_reject")]
    pub reject_explosive: bool,
    #[serde(default)]
    pub seed: u64,
}

impl MessmSpec {
    fn default_g() -> Vec<Vec<f64>> {
        vec![vec![0.70, -0.10], vec![0.10, 0.60]]
    }
    fn default_h() -> Vec<Vec<f64>> {
        vec![vec![1.0, 0.0], vec![0.2, 0.9], vec![0.3, 0.4], vec![0.4, 0.2]]
    }
    fn default_r() -> f64 {
        0.25
    }
    fn default_sigma() -> f64 {
        0.05
    }
    fn default_reject() -> bool {
        true
    }

    pub fn new(n: usize, t: usize) -> Self {
        Self {
            n,
            t,
            g: Self::default_g(),
            h: Self::default_h(),
            r: Self::default_r(),
            sigma_g: Self::default_sigma(),
            sigma_h: Self::default_sigma(),
            reject_explosive: true,
            seed: 0,
        }
    }

    pub fn g_matrix(&self) -> DMatrix<f64> {
        let q = self.g.len();
        DMatrix::from_fn(q, q, |r, c| self.g[r][c])
    }

    pub fn h_matrix(&self) -> DMatrix<f64> {
        let (p, q) = (self.h.len(), self.g.len());
        DMatrix::from_fn(p, q, |r, c| self.h[r][c])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalizedSpec {
    pub n: usize,
    pub t: usize,
    #[serde(default = "LocalizedSpec::default_mu")]
    pub mu: Vec<f64>,
    #[serde(default = "default_sigma2")]
    pub sigma2: f64,
    #[serde(default = "LocalizedSpec::default_tau_a2")]
    pub tau_a2: f64,
    #[serde(default = "LocalizedSpec::default_tau_b2")]
    pub tau_b2: f64,
    pub t0: usize,
    #[serde(default = "default_stickiness")]
    pub stickiness: f64,
    #[serde(default)]
    pub seed: u64,
}

impl LocalizedSpec {
    fn default_mu() -> Vec<f64> {
        vec![1.5, -1.5]
    }
    fn default_tau_a2() -> f64 {
        1.0
    }
    fn default_tau_b2() -> f64 {
        1.5
    }

    pub fn new(n: usize, t: usize, t0: usize) -> Self {
        Self { n, t, mu: Self::default_mu(), sigma2: 1.0, tau_a2: 1.0, tau_b2: 1.5, t0, stickiness: 0.92, seed: 0 }
    }
}

/// One data-generating configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum ScenarioSpec {
    GaussianMhmm(GaussianMhmmSpec),
    BernoulliMhmm(BernoulliMhmmSpec),
    Messm(MessmSpec),
    Localized(LocalizedSpec),
}

impl ScenarioSpec {
    pub fn seed(&self) -> u64 {
        match self {
            ScenarioSpec::GaussianMhmm(s) => s.seed,
            ScenarioSpec::BernoulliMhmm(s) => s.seed,
            ScenarioSpec::Messm(s) => s.seed,
            ScenarioSpec::Localized(s) => s.seed,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        match &mut self {
            ScenarioSpec::GaussianMhmm(s) => s.seed = seed,
            ScenarioSpec::BernoulliMhmm(s) => s.seed = seed,
            ScenarioSpec::Messm(s) => s.seed = seed,
            ScenarioSpec::Localized(s) => s.seed = seed,
        }
        self
    }

    pub fn n_subjects(&self) -> usize {
        match self {
            ScenarioSpec::GaussianMhmm(s) => s.n,
            ScenarioSpec::BernoulliMhmm(s) => s.n,
            ScenarioSpec::Messm(s) => s.n,
            ScenarioSpec::Localized(s) => s.n,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScenarioSpec::GaussianMhmm(_) => "gaussian_mhmm",
            ScenarioSpec::BernoulliMhmm(_) => "bernoulli_mhmm",
            ScenarioSpec::Messm(_) => "messm",
            ScenarioSpec::Localized(_) => "localized",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AvemError::InvalidParameter(m.to_string()));
        match self {
            ScenarioSpec::GaussianMhmm(s) => {
                if s.n == 0 || s.t == 0 || s.k == 0 || s.d == 0 {
                    return bad("n, t, k and d must be positive");
                }
                if !(s.tau2 >= 0.0 && s.sigma2 > 0.0) {
                    return bad("tau2 must be >= 0 and sigma2 > 0");
                }
                if s.levels().len() != s.k {
                    return bad("levels must have k entries");
                }
            }
            ScenarioSpec::BernoulliMhmm(s) => {
                if s.n == 0 || s.t == 0 || s.beta.is_empty() || !(s.tau2 >= 0.0) {
                    return bad("n, t and beta must be non-empty and tau2 >= 0");
                }
            }
            ScenarioSpec::Messm(s) => {
                let q = s.g.len();
                if s.n == 0 || s.t == 0 || q == 0 || s.g.iter().any(|r| r.len() != q) {
                    return bad("g must be a non-empty square matrix and n, t positive");
                }
                if s.h.len() < q || s.h.iter().any(|r| r.len() != q) {
                    return bad("h must be p x q with p >= q");
                }
                if !(s.r > 0.0 && s.sigma_g >= 0.0 && s.sigma_h >= 0.0) {
                    return bad("r must be positive and random-effect variances non-negative");
                }
            }
            ScenarioSpec::Localized(s) => {
                if s.n == 0 || s.t == 0 || s.mu.is_empty() {
                    return bad("n, t and mu must be non-empty");
                }
                if s.t0 > s.t {
                    return bad("t0 must not exceed t");
                }
                if !(s.sigma2 > 0.0 && s.tau_a2 >= 0.0 && s.tau_b2 >= 0.0) {
                    return bad("variances must be non-negative and sigma2 positive");
                }
            }
        }
        if let ScenarioSpec::GaussianMhmm(GaussianMhmmSpec { stickiness, .. })
        | ScenarioSpec::BernoulliMhmm(BernoulliMhmmSpec { stickiness, .. })
        | ScenarioSpec::Localized(LocalizedSpec { stickiness, .. }) = self
        {
            if !(0.0..=1.0).contains(stickiness) {
                return bad("stickiness must lie in [0, 1]");
            }
        }
        Ok(())
    }
}

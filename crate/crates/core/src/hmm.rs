//! Log-space forward–backward inference for a finite-state HMM with fixed
//! emission log-densities.

use nalgebra::DMatrix;

use crate::error::{AvemError, Result};
use crate::linalg::logsumexp;

const PROB_TOL: f64 = 1e-12;
const RATIO_FLOOR: f64 = 1e-300;

/// `T × K` matrix of log emission densities `log e_{kt}`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogEmissions(DMatrix<f64>);

impl LogEmissions {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(AvemError::InvalidParameter(
                "emission matrix needs T >= 1 and K >= 1".into(),
            ));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            let (t, k) = (pos % values.nrows(), pos / values.nrows());
            return Err(AvemError::NonFinite(format!("log emission at t={t}, k={k}")));
        }
        Ok(Self(values))
    }

    pub fn from_fn(n_steps: usize, n_states: usize, f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        Self::new(DMatrix::from_fn(n_steps, n_states, f))
    }

    pub fn n_steps(&self) -> usize {
        self.0.nrows()
    }

    pub fn n_states(&self) -> usize {
        self.0.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// Initial law `π` and row-stochastic transition matrix `Γ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainParams {
    pub pi: Vec<f64>,
    pub gamma: DMatrix<f64>,
}

impl ChainParams {
    pub fn new(pi: Vec<f64>, gamma: DMatrix<f64>) -> Result<Self> {
        let chain = Self { pi, gamma };
        chain.validate()?;
        Ok(chain)
    }

    pub fn n_states(&self) -> usize {
        self.pi.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.pi.len();
        if k == 0 {
            return Err(AvemError::InvalidParameter("chain needs K >= 1".into()));
        }
        if self.gamma.nrows() != k || self.gamma.ncols() != k {
            return Err(AvemError::DimensionMismatch {
                what: "transition matrix",
                expected: k,
                found: self.gamma.nrows(),
            });
        }
        let bad = |v: &f64| !v.is_finite() || *v < 0.0;
        if self.pi.iter().any(bad) || self.gamma.iter().any(bad) {
            return Err(AvemError::InvalidParameter("negative or non-finite probability".into()));
        }
        if (self.pi.iter().sum::<f64>() - 1.0).abs() > PROB_TOL {
            return Err(AvemError::InvalidParameter("initial law does not sum to 1".into()));
        }
        for r in 0..k {
            if (self.gamma.row(r).sum() - 1.0).abs() > PROB_TOL {
                return Err(AvemError::InvalidParameter(format!("row {r} of Γ does not sum to 1")));
            }
        }
        Ok(())
    }

    /// Uniform initial law and a sticky Γ with the given diagonal.
    pub fn sticky(n_states: usize, diag: f64) -> Self {
        let k = n_states;
        let off = if k > 1 { (1.0 - diag) / (k - 1) as f64 } else { 0.0 };
        let gamma = DMatrix::from_fn(k, k, |i, j| if i == j { if k > 1 { diag } else { 1.0 } } else { off });
        Self { pi: vec![1.0 / k as f64; k], gamma }
    }

    fn log_pi(&self) -> Vec<f64> {
        self.pi.iter().map(|p| p.ln()).collect()
    }

    fn log_gamma(&self) -> DMatrix<f64> {
        self.gamma.map(f64::ln)
    }
}

/// Conditional state and pairwise posteriors plus `log p(D | f, θ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StatePosterior {
    /// `T × K`, row t holds `ζ_{·t}`.
    pub zeta: DMatrix<f64>,
    /// `T − 1` matrices, entry `(k, ℓ)` of element t is `ξ_{kℓt}`.
    pub xi: Vec<DMatrix<f64>>,
    pub log_marginal: f64,
}

impl StatePosterior {
    pub fn n_steps(&self) -> usize {
        self.zeta.nrows()
    }

    pub fn n_states(&self) -> usize {
        self.zeta.ncols()
    }
}

fn check_dims(log_e: &LogEmissions, chain: &ChainParams) -> Result<()> {
    if log_e.n_states() != chain.n_states() {
        return Err(AvemError::DimensionMismatch {
            what: "emission states vs chain states",
            expected: chain.n_states(),
            found: log_e.n_states(),
        });
    }
    Ok(())
}

/// `log a_{kt} = log p(U_t = k, D_{1:t})`.
pub fn forward_pass(log_e: &LogEmissions, chain: &ChainParams) -> Result<DMatrix<f64>> {
    check_dims(log_e, chain)?;
    let (t_len, k) = (log_e.n_steps(), log_e.n_states());
    let e = log_e.values();
    let log_pi = chain.log_pi();
    let log_gamma = chain.log_gamma();
    let mut alpha = DMatrix::zeros(t_len, k);
    for s in 0..k {
        alpha[(0, s)] = log_pi[s] + e[(0, s)];
    }
    let mut buf = vec![0.0; k];
    for t in 1..t_len {
        for s in 0..k {
            for (l, b) in buf.iter_mut().enumerate() {
                *b = alpha[(t - 1, l)] + log_gamma[(l, s)];
            }
            alpha[(t, s)] = e[(t, s)] + logsumexp(&buf);
        }
    }
    Ok(alpha)
}

/// `log b_{kt} = log p(D_{t+1:T} | U_t = k)`.
pub fn backward_pass(log_e: &LogEmissions, chain: &ChainParams) -> Result<DMatrix<f64>> {
    check_dims(log_e, chain)?;
    let (t_len, k) = (log_e.n_steps(), log_e.n_states());
    let e = log_e.values();
    let log_gamma = chain.log_gamma();
    let mut beta = DMatrix::zeros(t_len, k);
    let mut buf = vec![0.0; k];
    for t in (0..t_len.saturating_sub(1)).rev() {
        for s in 0..k {
            for (l, b) in buf.iter_mut().enumerate() {
                *b = log_gamma[(s, l)] + e[(t + 1, l)] + beta[(t + 1, l)];
            }
            beta[(t, s)] = logsumexp(&buf);
        }
    }
    Ok(beta)
}

/// `log p(D | f, θ)`: log-sum-exp of the final forward column.
pub fn conditional_log_marginal(log_alpha: &DMatrix<f64>) -> Result<f64> {
    if log_alpha.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(AvemError::NonFinite("forward matrix".into()));
    }
    let last: Vec<f64> = log_alpha.row(log_alpha.nrows() - 1).iter().copied().collect();
    Ok(logsumexp(&last))
}

pub fn state_posteriors(
    log_alpha: &DMatrix<f64>,
    log_beta: &DMatrix<f64>,
    chain: &ChainParams,
    log_e: &LogEmissions,
) -> Result<StatePosterior> {
    check_dims(log_e, chain)?;
    let (t_len, k) = (log_e.n_steps(), log_e.n_states());
    if log_alpha.shape() != (t_len, k) || log_beta.shape() != (t_len, k) {
        return Err(AvemError::DimensionMismatch {
            what: "forward/backward matrices",
            expected: t_len,
            found: log_alpha.nrows(),
        });
    }
    let log_z = conditional_log_marginal(log_alpha)?;
    if log_z == f64::NEG_INFINITY {
        return Err(AvemError::DegenerateLikelihood);
    }
    let e = log_e.values();
    let log_gamma = chain.log_gamma();

    let mut zeta = DMatrix::zeros(t_len, k);
    for t in 0..t_len {
        let mut row_sum = 0.0;
        for s in 0..k {
            let v = (log_alpha[(t, s)] + log_beta[(t, s)] - log_z).exp();
            zeta[(t, s)] = v;
            row_sum += v;
        }
        // rounding drift only; the row is a probability vector in exact arithmetic
        for s in 0..k {
            zeta[(t, s)] /= row_sum;
        }
    }

    let mut xi = Vec::with_capacity(t_len.saturating_sub(1));
    for t in 0..t_len.saturating_sub(1) {
        let mut m = DMatrix::from_fn(k, k, |a, b| {
            (log_alpha[(t, a)] + log_gamma[(a, b)] + e[(t + 1, b)] + log_beta[(t + 1, b)] - log_z).exp()
        });
        let total = m.sum();
        m /= total;
        xi.push(m);
    }
    Ok(StatePosterior { zeta, xi, log_marginal: log_z })
}

/// Full forward–backward pass.
pub fn forward_backward(log_e: &LogEmissions, chain: &ChainParams) -> Result<StatePosterior> {
    let alpha = forward_pass(log_e, chain)?;
    let beta = backward_pass(log_e, chain)?;
    state_posteriors(&alpha, &beta, chain, log_e)
}

fn xlogx_ratio(p: f64, q: f64) -> f64 {
    if p <= 0.0 {
        0.0
    } else {
        p * (p / q.max(RATIO_FLOOR)).ln()
    }
}

/// Entropy (nats) of the Markov-chain posterior over latent paths.
pub fn posterior_entropy(post: &StatePosterior) -> f64 {
    let k = post.n_states();
    let mut h = 0.0;
    for s in 0..k {
        h -= xlogx_ratio(post.zeta[(0, s)], 1.0);
    }
    for (t, xi) in post.xi.iter().enumerate() {
        for a in 0..k {
            let za = post.zeta[(t, a)];
            for b in 0..k {
                h -= xlogx_ratio(xi[(a, b)], za);
            }
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_chain(k: usize) -> ChainParams {
        ChainParams::new(vec![1.0 / k as f64; k], DMatrix::from_element(k, k, 1.0 / k as f64)).unwrap()
    }

    #[test]
    fn one_state_forward_is_zero() {
        let e = LogEmissions::from_fn(3, 1, |_, _| 0.0).unwrap();
        let chain = ChainParams::new(vec![1.0], DMatrix::from_element(1, 1, 1.0)).unwrap();
        let a = forward_pass(&e, &chain).unwrap();
        assert_eq!(a.as_slice(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn single_step_forward_is_prior() {
        let e = LogEmissions::from_fn(1, 2, |_, _| 0.0).unwrap();
        let a = forward_pass(&e, &uniform_chain(2)).unwrap();
        assert!((a[(0, 0)].exp() - 0.5).abs() < 1e-15);
        assert!((a[(0, 1)].exp() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn backward_terminal_and_uniform_collapse() {
        let c = 0.3f64;
        let (t_len, k) = (5, 3);
        let e = LogEmissions::from_fn(t_len, k, |_, _| c.ln()).unwrap();
        let b = backward_pass(&e, &uniform_chain(k)).unwrap();
        for s in 0..k {
            assert_eq!(b[(t_len - 1, s)], 0.0);
            for t in 0..t_len {
                let expect = ((t_len - 1 - t) as f64) * c.ln();
                assert!((b[(t, s)] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn symmetric_posterior_and_entropy() {
        let (t_len, k) = (4, 3);
        let e = LogEmissions::from_fn(t_len, k, |_, _| -1.7).unwrap();
        let post = forward_backward(&e, &uniform_chain(k)).unwrap();
        for v in post.zeta.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-14);
        }
        for xi in &post.xi {
            for v in xi.iter() {
                assert!((v - 1.0 / 9.0).abs() < 1e-14);
            }
        }
        let h = posterior_entropy(&post);
        assert!((h - t_len as f64 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn deterministic_path_has_zero_entropy_and_single_path_marginal() {
        let e = LogEmissions::from_fn(4, 2, |t, k| -0.5 * (t + k) as f64).unwrap();
        let chain = ChainParams::new(vec![1.0, 0.0], DMatrix::identity(2, 2)).unwrap();
        let post = forward_backward(&e, &chain).unwrap();
        assert_eq!(posterior_entropy(&post), 0.0);
        let expect: f64 = (0..4).map(|t| -0.5 * t as f64).sum();
        assert!((post.log_marginal - expect).abs() < 1e-14);
    }

    #[test]
    fn degenerate_likelihood_is_an_error() {
        // finite entries whose running sum overflows to -inf
        let e = LogEmissions::from_fn(3, 2, |_, _| -1.0e308).unwrap();
        let r = forward_backward(&e, &uniform_chain(2));
        assert_eq!(r, Err(AvemError::DegenerateLikelihood));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(LogEmissions::from_fn(2, 2, |t, _| if t == 1 { f64::NAN } else { 0.0 }).is_err());
        let e = LogEmissions::from_fn(2, 3, |_, _| 0.0).unwrap();
        assert!(matches!(forward_pass(&e, &uniform_chain(2)), Err(AvemError::DimensionMismatch { .. })));
        assert!(ChainParams::new(vec![0.6, 0.6], DMatrix::identity(2, 2)).is_err());
    }
}

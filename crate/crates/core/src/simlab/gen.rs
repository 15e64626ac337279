use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{
    rng_for, stationary_distribution, BernoulliMhmmSpec, GaussianMhmmSpec, LocalizedSpec, MessmSpec, ScenarioSpec,
};
use crate::data::Sequence;
use crate::emission::{logistic, BernoulliEmission, GaussianEmission};
use crate::error::{AvemError, Result};
use crate::hmm::ChainParams;
use crate::mhmm::MhmmParams;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianTruth {
    /// `sigma = τ² I`; not necessarily positive definite (τ² may be 0).
    pub params: MhmmParams<GaussianEmission>,
    pub effects: Vec<DVector<f64>>,
    pub states: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BernoulliTruth {
    pub params: MhmmParams<BernoulliEmission>,
    pub effects: Vec<DVector<f64>>,
    pub states: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MessmTruth {
    pub g: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub r: DVector<f64>,
    pub sigma_g: f64,
    pub sigma_h: f64,
    pub g_i: Vec<DMatrix<f64>>,
    pub h_i: Vec<DMatrix<f64>>,
    /// Latent states, `T × q` per subject.
    pub states: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizedTruth {
    pub chain: ChainParams,
    pub mu: Vec<f64>,
    pub sigma2: f64,
    pub tau_a2: f64,
    pub tau_b2: f64,
    pub t0: usize,
    pub f_a: Vec<f64>,
    pub f_b: Vec<f64>,
    pub states: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Truth {
    Gaussian(GaussianTruth),
    Bernoulli(BernoulliTruth),
    Messm(MessmTruth),
    Localized(LocalizedTruth),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub data: Vec<Sequence>,
    pub truth: Truth,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn categorical(rng: &mut ChaCha8Rng, probs: impl Iterator<Item = f64>) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (k, p) in probs.enumerate() {
        acc += p;
        last = k;
        if u < acc {
            return k;
        }
    }
    last
}

/// State path of length `t` started from `chain.pi`.
pub fn sample_markov_chain(rng: &mut ChaCha8Rng, chain: &ChainParams, t: usize) -> Vec<usize> {
    let mut path = Vec::with_capacity(t);
    if t == 0 {
        return path;
    }
    path.push(categorical(rng, chain.pi.iter().copied()));
    for _ in 1..t {
        let prev = *path.last().unwrap_or(&0);
        path.push(categorical(rng, chain.gamma.row(prev).iter().copied()));
    }
    path
}

fn stationary_chain(k: usize, stickiness: f64) -> Result<ChainParams> {
    let mut chain = ChainParams::sticky(k, stickiness);
    chain.pi = stationary_distribution(&chain.gamma)?;
    Ok(chain)
}

pub fn gen_gaussian_mhmm(spec: &GaussianMhmmSpec, replicate: u64) -> Result<Dataset> {
    ScenarioSpec::GaussianMhmm(spec.clone()).validate()?;
    let (k, d) = (spec.k, spec.d);
    let levels = spec.levels();
    let chain = stationary_chain(k, spec.stickiness)?;
    let emission = GaussianEmission::new(DMatrix::from_fn(k, d, |s, _| levels[s]), vec![spec.sigma2; k])?;
    let tau = spec.tau2.sqrt();
    let sd = spec.sigma2.sqrt();
    let mut data = Vec::with_capacity(spec.n);
    let mut effects = Vec::with_capacity(spec.n);
    let mut states = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let mut rng = rng_for(spec.seed, replicate, i as u64);
        let f = DVector::from_fn(d, |_, _| tau * normal(&mut rng));
        let path = sample_markov_chain(&mut rng, &chain, spec.t);
        let mut values = Vec::with_capacity(spec.t * d);
        for &u in &path {
            for j in 0..d {
                values.push(emission.mu[(u, j)] + f[j] + sd * normal(&mut rng));
            }
        }
        data.push(Sequence::new(d, values)?);
        effects.push(f);
        states.push(path);
    }
    let params = MhmmParams { chain, emission, sigma: DMatrix::identity(d, d) * spec.tau2 };
    Ok(Dataset { data, truth: Truth::Gaussian(GaussianTruth { params, effects, states }) })
}

pub fn gen_bernoulli_mhmm(spec: &BernoulliMhmmSpec, replicate: u64) -> Result<Dataset> {
    ScenarioSpec::BernoulliMhmm(spec.clone()).validate()?;
    let k = spec.beta.len();
    let chain = stationary_chain(k, spec.stickiness)?;
    let emission = BernoulliEmission::new(spec.beta.clone())?;
    let tau = spec.tau2.sqrt();
    let mut data = Vec::with_capacity(spec.n);
    let mut effects = Vec::with_capacity(spec.n);
    let mut states = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let mut rng = rng_for(spec.seed, replicate, i as u64);
        let f = tau * normal(&mut rng);
        let path = sample_markov_chain(&mut rng, &chain, spec.t);
        let values = path
            .iter()
            .map(|&u| {
                let p = logistic(spec.beta[u] + f);
                if rng.random::<f64>() < p {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        data.push(Sequence::new(1, values)?);
        effects.push(DVector::from_element(1, f));
        states.push(path);
    }
    let params = MhmmParams { chain, emission, sigma: DMatrix::from_element(1, 1, spec.tau2) };
    Ok(Dataset { data, truth: Truth::Bernoulli(BernoulliTruth { params, effects, states }) })
}

const MAX_REDRAWS: usize = 10_000;

fn draw_transition(rng: &mut ChaCha8Rng, g: &DMatrix<f64>, sd: f64) -> DMatrix<f64> {
    let q = g.nrows();
    // column-major draw order matches vec(G)
    let mut gi = g.clone();
    for c in 0..q {
        for r in 0..q {
            gi[(r, c)] += sd * normal(rng);
        }
    }
    gi
}

fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

pub fn gen_messm(spec: &MessmSpec, replicate: u64) -> Result<Dataset> {
    ScenarioSpec::Messm(spec.clone()).validate()?;
    let g = spec.g_matrix();
    let h = spec.h_matrix();
    let (p, q) = h.shape();
    let (sd_g, sd_h, sd_r) = (spec.sigma_g.sqrt(), spec.sigma_h.sqrt(), spec.r.sqrt());
    let mut data = Vec::with_capacity(spec.n);
    let mut g_i = Vec::with_capacity(spec.n);
    let mut h_i = Vec::with_capacity(spec.n);
    let mut states = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let mut rng = rng_for(spec.seed, replicate, i as u64);
        let mut gi = draw_transition(&mut rng, &g, sd_g);
        let mut tries = 1;
        while spec.reject_explosive && spectral_radius(&gi) >= 1.0 {
            if tries == MAX_REDRAWS {
                return Err(AvemError::InvalidParameter(format!(
                    "no stable transition matrix after {MAX_REDRAWS} draws; lower sigma_g or disable reject_explosive"
                )));
            }
            gi = draw_transition(&mut rng, &g, sd_g);
            tries += 1;
        }
        let mut hi = h.clone();
        for c in 0..q {
            for r in c..p {
                hi[(r, c)] += sd_h * normal(&mut rng);
            }
        }
        let mut u = DMatrix::zeros(spec.t, q);
        let mut values = Vec::with_capacity(spec.t * p);
        let mut state = DVector::from_fn(q, |_, _| normal(&mut rng));
        for t in 0..spec.t {
            if t > 0 {
                state = &gi * &state + DVector::from_fn(q, |_, _| normal(&mut rng));
            }
            u.set_row(t, &state.transpose());
            let mean = &hi * &state;
            for j in 0..p {
                values.push(mean[j] + sd_r * normal(&mut rng));
            }
        }
        data.push(Sequence::new(p, values)?);
        g_i.push(gi);
        h_i.push(hi);
        states.push(u);
    }
    Ok(Dataset {
        data,
        truth: Truth::Messm(MessmTruth {
            g,
            h,
            r: DVector::from_element(p, spec.r),
            sigma_g: spec.sigma_g,
            sigma_h: spec.sigma_h,
            g_i,
            h_i,
            states,
        }),
    })
}

pub fn gen_localized(spec: &LocalizedSpec, replicate: u64) -> Result<Dataset> {
    ScenarioSpec::Localized(spec.clone()).validate()?;
    let k = spec.mu.len();
    let chain = stationary_chain(k, spec.stickiness)?;
    let (ta, tb, sd) = (spec.tau_a2.sqrt(), spec.tau_b2.sqrt(), spec.sigma2.sqrt());
    let mut data = Vec::with_capacity(spec.n);
    let mut f_a = Vec::with_capacity(spec.n);
    let mut f_b = Vec::with_capacity(spec.n);
    let mut states = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let mut rng = rng_for(spec.seed, replicate, i as u64);
        let a = ta * normal(&mut rng);
        let b = tb * normal(&mut rng);
        let path = sample_markov_chain(&mut rng, &chain, spec.t);
        let values = path
            .iter()
            .enumerate()
            .map(|(t, &u)| {
                let local = if t < spec.t0 { b } else { 0.0 };
                spec.mu[u] + a + local + sd * normal(&mut rng)
            })
            .collect();
        data.push(Sequence::new(1, values)?);
        f_a.push(a);
        f_b.push(b);
        states.push(path);
    }
    Ok(Dataset {
        data,
        truth: Truth::Localized(LocalizedTruth {
            chain,
            mu: spec.mu.clone(),
            sigma2: spec.sigma2,
            tau_a2: spec.tau_a2,
            tau_b2: spec.tau_b2,
            t0: spec.t0,
            f_a,
            f_b,
            states,
        }),
    })
}

/// Replicate `replicate` of `spec`, seeded from `spec.seed`.
pub fn generate(spec: &ScenarioSpec, replicate: u64) -> Result<Dataset> {
    match spec {
        ScenarioSpec::GaussianMhmm(s) => gen_gaussian_mhmm(s, replicate),
        ScenarioSpec::BernoulliMhmm(s) => gen_bernoulli_mhmm(s, replicate),
        ScenarioSpec::Messm(s) => gen_messm(s, replicate),
        ScenarioSpec::Localized(s) => gen_localized(s, replicate),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_defaults_and_zero_effects() {
        let mut spec = GaussianMhmmSpec::new(5, 10, 3, 2, 0.0);
        spec.seed = 9;
        let ds = gen_gaussian_mhmm(&spec, 0).unwrap();
        let Truth::Gaussian(t) = &ds.truth else { panic!() };
        assert_eq!(t.params.emission.mu.column(0).as_slice(), &[1.5, 0.0, -1.5]);
        assert_eq!(t.params.emission.mu.column(1).as_slice(), &[1.5, 0.0, -1.5]);
        assert!(t.effects.iter().all(|f| f.iter().all(|v| *v == 0.0)));
        assert_eq!(ds, gen_gaussian_mhmm(&spec, 0).unwrap());
        assert_ne!(ds.data, gen_gaussian_mhmm(&spec, 1).unwrap().data);
    }

    #[test]
    fn messm_defaults() {
        let ds = gen_messm(&MessmSpec::new(3, 5), 0).unwrap();
        let Truth::Messm(t) = &ds.truth else { panic!() };
        assert_eq!(t.g[(0, 0)], 0.70);
        assert_eq!(t.h[(0, 0)], 1.0);
        assert_eq!(t.h[(0, 1)], 0.0);
        assert!(t.h_i.iter().all(|h| h[(0, 1)] == 0.0));
    }

    #[test]
    fn messm_transitions_are_stable_by_default() {
        let mut spec = MessmSpec::new(200, 2);
        spec.sigma_g = 0.2;
        let ds = gen_messm(&spec, 0).unwrap();
        let Truth::Messm(t) = &ds.truth else { panic!() };
        assert!(t.g_i.iter().all(|g| spectral_radius(g) < 1.0));
        spec.reject_explosive = false;
        let ds = gen_messm(&spec, 0).unwrap();
        let Truth::Messm(t) = &ds.truth else { panic!() };
        assert!(t.g_i.iter().any(|g| spectral_radius(g) >= 1.0));
    }

    #[test]
    fn messm_zero_variance_shares_matrices() {
        let mut spec = MessmSpec::new(4, 5);
        spec.sigma_g = 0.0;
        spec.sigma_h = 0.0;
        let ds = gen_messm(&spec, 0).unwrap();
        let Truth::Messm(t) = &ds.truth else { panic!() };
        assert!(t.g_i.iter().all(|g| *g == t.g));
        assert!(t.h_i.iter().all(|h| *h == t.h));
    }

    #[test]
    fn bernoulli_defaults_binary() {
        let ds = gen_bernoulli_mhmm(&BernoulliMhmmSpec::new(3, 20, 0.25), 0).unwrap();
        let Truth::Bernoulli(t) = &ds.truth else { panic!() };
        assert_eq!(t.params.emission.beta, vec![-1.5, 1.5]);
        assert!(ds.data.iter().all(|s| s.values().iter().all(|v| *v == 0.0 || *v == 1.0)));
    }

    #[test]
    fn localized_defaults() {
        let ds = gen_localized(&LocalizedSpec::new(2, 40, 10), 0).unwrap();
        let Truth::Localized(t) = &ds.truth else { panic!() };
        assert_eq!(t.tau_b2, 1.5);
        assert_eq!(t.mu, vec![1.5, -1.5]);
    }
}

mod common;

use avem::kalman::{dense_joint_oracle, kalman_filter, rts_smoother, smooth, LgssmSpec};
use avem::linalg::{spd_inverse, spd_logdet};
use common::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

fn random_spec(seed: u64, q: usize, p: usize) -> LgssmSpec {
    let mut r = rng(seed);
    let a = DMatrix::from_fn(q, q, |_, _| normal(&mut r));
    let mut g = DMatrix::from_fn(q, q, |_, _| normal(&mut r));
    // scale to spectral norm below 0.95
    let s = g.clone().svd(false, false).singular_values.max();
    g *= 0.95 / s.max(0.95);
    LgssmSpec {
        g,
        h: DMatrix::from_fn(p, q, |_, _| normal(&mut r)),
        r: DVector::from_fn(p, |_, _| 0.2 + r.random::<f64>()),
        m0: DVector::from_fn(q, |_, _| normal(&mut r)),
        p0: &a * a.transpose() + DMatrix::identity(q, q) * 0.5,
    }
}

fn random_obs(seed: u64, t_len: usize, p: usize) -> DMatrix<f64> {
    let mut r = rng(seed.wrapping_add(99));
    DMatrix::from_fn(t_len, p, |_, _| 2.0 * normal(&mut r))
}

/// Prior mean and covariance of the stacked states `(U_1..U_T)`.
fn prior_joint(spec: &LgssmSpec, t_len: usize) -> (DVector<f64>, DMatrix<f64>) {
    let q = spec.g.nrows();
    let mut mean = DVector::zeros(t_len * q);
    let mut marg: Vec<DMatrix<f64>> = Vec::new();
    let (mut m, mut p) = (spec.m0.clone(), spec.p0.clone());
    for t in 0..t_len {
        if t > 0 {
            m = &spec.g * &m;
            p = &spec.g * &p * spec.g.transpose() + DMatrix::identity(q, q);
        }
        mean.rows_mut(t * q, q).copy_from(&m);
        marg.push(p.clone());
    }
    // Cov(U_t, U_s) = G Cov(U_{t-1}, U_s) for t > s
    let mut cov = DMatrix::zeros(t_len * q, t_len * q);
    for s in 0..t_len {
        let mut block = marg[s].clone();
        for t in s..t_len {
            if t > s {
                block = &spec.g * &block;
            }
            cov.view_mut((t * q, s * q), (q, q)).copy_from(&block);
            cov.view_mut((s * q, t * q), (q, q)).copy_from(&block.transpose());
        }
    }
    (mean, cov)
}

#[test]
fn filter_log_likelihood_matches_dense_gaussian() {
    for seed in 0..20 {
        let (q, p, t_len) = (2, 3, 5);
        let spec = random_spec(seed, q, p);
        let obs = random_obs(seed, t_len, p);
        let (mu_u, cov_u) = prior_joint(&spec, t_len);
        let mut big_h = DMatrix::zeros(t_len * p, t_len * q);
        for t in 0..t_len {
            big_h.view_mut((t * p, t * q), (p, q)).copy_from(&spec.h);
        }
        let mut cov_d = &big_h * &cov_u * big_h.transpose();
        for t in 0..t_len {
            for j in 0..p {
                cov_d[(t * p + j, t * p + j)] += spec.r[j];
            }
        }
        let d = DVector::from_fn(t_len * p, |i, _| obs[(i / p, i % p)]);
        let resid = d - &big_h * mu_u;
        let inv = spd_inverse(&cov_d, "test").unwrap();
        let ll = -0.5 * ((t_len * p) as f64 * (2.0 * std::f64::consts::PI).ln()
            + spd_logdet(&cov_d, "test").unwrap()
            + resid.dot(&(&inv * &resid)));
        let f = kalman_filter(&spec, &obs).unwrap();
        assert!((f.log_likelihood - ll).abs() < 1e-8, "{} vs {ll}", f.log_likelihood);
    }
}

#[test]
fn no_dynamics_smoothed_equals_filtered() {
    let mut spec = random_spec(3, 2, 3);
    spec.g = DMatrix::zeros(2, 2);
    let obs = random_obs(3, 6, 3);
    let f = kalman_filter(&spec, &obs).unwrap();
    let s = rts_smoother(&spec, &f).unwrap();
    for t in 0..6 {
        assert!((&s.m_hat[t] - &f.filt_mean[t]).amax() < 1e-12);
        assert!(max_abs(&s.p_hat[t], &f.filt_cov[t]) < 1e-12);
    }
    assert!(s.p_lag.iter().all(|p| p.amax() == 0.0));
}

#[test]
fn uninformative_data_returns_prior() {
    let mut spec = random_spec(4, 2, 3);
    spec.r = DVector::from_element(3, 1e12);
    let t_len = 6;
    let s = smooth(&spec, &random_obs(4, t_len, 3)).unwrap();
    let (mean, cov) = prior_joint(&spec, t_len);
    for t in 0..t_len {
        for i in 0..2 {
            let m = mean[t * 2 + i];
            assert!((s.m_hat[t][i] - m).abs() <= 1e-4 * m.abs().max(1.0));
            for j in 0..2 {
                let c = cov[(t * 2 + i, t * 2 + j)];
                assert!((s.p_hat[t][(i, j)] - c).abs() <= 1e-4 * c.abs().max(1.0));
            }
        }
    }
}

#[test]
fn single_step_is_bayes_update() {
    let spec = random_spec(5, 2, 3);
    let obs = random_obs(5, 1, 3);
    let s = smooth(&spec, &obs).unwrap();
    let rinv = DMatrix::from_diagonal(&spec.r.map(|v| 1.0 / v));
    let prec = spd_inverse(&spec.p0, "p0").unwrap() + spec.h.transpose() * &rinv * &spec.h;
    let cov = spd_inverse(&prec, "post").unwrap();
    let y = obs.row(0).transpose();
    let mean = &cov * (spd_inverse(&spec.p0, "p0").unwrap() * &spec.m0 + spec.h.transpose() * &rinv * y);
    assert!((&s.m_hat[0] - mean).amax() < 1e-10);
    assert!(max_abs(&s.p_hat[0], &cov) < 1e-10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn smoother_matches_dense_conditioning(seed in any::<u64>(), q in 1usize..=3, p in 1usize..=4, t_len in 1usize..=8) {
        let spec = random_spec(seed, q, p);
        let obs = random_obs(seed, t_len, p);
        let s = smooth(&spec, &obs).unwrap();
        let (mean, cov) = dense_joint_oracle(&spec, &obs).unwrap();
        for t in 0..t_len {
            prop_assert!((&s.m_hat[t] - mean.rows(t * q, q)).amax() < 1e-8);
            prop_assert!(max_abs(&s.p_hat[t], &cov.view((t * q, t * q), (q, q)).into_owned()) < 1e-8);
            if t > 0 {
                prop_assert!(max_abs(&s.p_lag[t - 1], &cov.view((t * q, (t - 1) * q), (q, q)).into_owned()) < 1e-8);
            }
        }
    }

    #[test]
    fn covariances_symmetric_and_moments_consistent(seed in any::<u64>(), q in 1usize..=3, p in 1usize..=4, t_len in 1usize..=12) {
        let spec = random_spec(seed, q, p);
        let s = smooth(&spec, &random_obs(seed, t_len, p)).unwrap();
        for t in 0..t_len {
            prop_assert!(max_abs(&s.p_hat[t], &s.p_hat[t].transpose()) < 1e-12);
            let qh = &s.p_hat[t] + &s.m_hat[t] * s.m_hat[t].transpose();
            prop_assert!(max_abs(&s.q_hat[t], &qh) <= 1e-15 * qh.amax().max(1.0));
            if t > 0 {
                let ql = &s.p_lag[t - 1] + &s.m_hat[t] * s.m_hat[t - 1].transpose();
                prop_assert!(max_abs(&s.q_lag[t - 1], &ql) <= 1e-15 * ql.amax().max(1.0));
            }
        }
    }
}

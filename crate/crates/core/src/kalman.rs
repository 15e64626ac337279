//! Kalman filter, RTS smoother and lag-one cross-covariances for a linear
//! Gaussian state-space model with unit state noise, plus a dense
//! joint-Gaussian conditioning routine used as a cross-check.
//!
//! Model: `U_1 ~ N(m0, P0)`, `U_t | U_{t-1} ~ N(G U_{t-1}, I)`,
//! `D_t | U_t ~ N(H U_t, diag(r))`.

use nalgebra::{DMatrix, DVector};

use crate::error::{AvemError, Result};
use crate::linalg::{cholesky, symmetrize};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq)]
pub struct LgssmSpec {
    /// `q × q` transition matrix.
    pub g: DMatrix<f64>,
    /// `p × q` loading matrix.
    pub h: DMatrix<f64>,
    /// Diagonal of the observation covariance.
    pub r: DVector<f64>,
    pub m0: DVector<f64>,
    pub p0: DMatrix<f64>,
}

impl LgssmSpec {
    pub fn state_dim(&self) -> usize {
        self.g.nrows()
    }

    pub fn obs_dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let q = self.g.nrows();
        if self.g.ncols() != q || self.h.ncols() != q || self.m0.len() != q || self.p0.shape() != (q, q) {
            return Err(AvemError::DimensionMismatch { what: "state dimension", expected: q, found: self.h.ncols() });
        }
        if self.r.len() != self.h.nrows() {
            return Err(AvemError::DimensionMismatch {
                what: "observation noise",
                expected: self.h.nrows(),
                found: self.r.len(),
            });
        }
        if self.r.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(AvemError::InvalidParameter("observation variances must be positive".into()));
        }
        cholesky(&self.p0, "initial covariance P0")?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FilterOutput {
    pub pred_mean: Vec<DVector<f64>>,
    pub pred_cov: Vec<DMatrix<f64>>,
    pub filt_mean: Vec<DVector<f64>>,
    pub filt_cov: Vec<DMatrix<f64>>,
    pub gains: Vec<DMatrix<f64>>,
    /// `log p(D_{1:T})` by prediction-error decomposition.
    pub log_likelihood: f64,
}

/// Smoothed posterior moments of `U_{1:T}` given all observations.
#[derive(Debug, Clone, PartialEq)]
pub struct SmootherMoments {
    pub m_hat: Vec<DVector<f64>>,
    pub p_hat: Vec<DMatrix<f64>>,
    /// Element `t - 1` holds `Cov(U_t, U_{t-1} | D)` for `t = 2..T`.
    pub p_lag: Vec<DMatrix<f64>>,
    /// `E[U_t U_tᵀ | D]`.
    pub q_hat: Vec<DMatrix<f64>>,
    /// Element `t - 1` holds `E[U_t U_{t-1}ᵀ | D]`.
    pub q_lag: Vec<DMatrix<f64>>,
    pub log_likelihood: f64,
}

impl SmootherMoments {
    pub fn len(&self) -> usize {
        self.m_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m_hat.is_empty()
    }

    /// Rebuilds the second-moment fields from means and covariances.
    pub fn refresh_second_moments(&mut self) {
        self.q_hat = self.p_hat.iter().zip(&self.m_hat).map(|(p, m)| p + m * m.transpose()).collect();
        self.q_lag = self
            .p_lag
            .iter()
            .enumerate()
            .map(|(i, p)| p + &self.m_hat[i + 1] * self.m_hat[i].transpose())
            .collect();
    }
}

/// Forward filtering pass. `obs` is `T × p`.
pub fn kalman_filter(spec: &LgssmSpec, obs: &DMatrix<f64>) -> Result<FilterOutput> {
    spec.validate()?;
    let t_len = obs.nrows();
    if t_len == 0 {
        return Err(AvemError::InvalidParameter("sequence needs T >= 1".into()));
    }
    if obs.ncols() != spec.obs_dim() {
        return Err(AvemError::DimensionMismatch { what: "observation columns", expected: spec.obs_dim(), found: obs.ncols() });
    }
    let q = spec.state_dim();
    let r_mat = DMatrix::from_diagonal(&spec.r);
    let eye = DMatrix::<f64>::identity(q, q);
    let mut out = FilterOutput {
        pred_mean: Vec::with_capacity(t_len),
        pred_cov: Vec::with_capacity(t_len),
        filt_mean: Vec::with_capacity(t_len),
        filt_cov: Vec::with_capacity(t_len),
        gains: Vec::with_capacity(t_len),
        log_likelihood: 0.0,
    };
    let p = spec.obs_dim() as f64;
    for t in 0..t_len {
        let (m_pred, mut p_pred) = if t == 0 {
            (spec.m0.clone(), spec.p0.clone())
        } else {
            let m = &spec.g * &out.filt_mean[t - 1];
            let pc = &spec.g * &out.filt_cov[t - 1] * spec.g.transpose() + &eye;
            (m, pc)
        };
        symmetrize(&mut p_pred);
        let mut s = &spec.h * &p_pred * spec.h.transpose() + &r_mat;
        symmetrize(&mut s);
        let chol = nalgebra::Cholesky::new(s)
            .ok_or_else(|| AvemError::Singular(format!("innovation covariance at t={}", t + 1)))?;
        let y = obs.row(t).transpose();
        let innov = &y - &spec.h * &m_pred;
        // K = P Hᵀ S⁻¹  ⇔  Kᵀ = S⁻¹ H P
        let gain = chol.solve(&(&spec.h * &p_pred)).transpose();
        let m_filt = &m_pred + &gain * &innov;
        let mut p_filt = (&eye - &gain * &spec.h) * &p_pred;
        symmetrize(&mut p_filt);

        let logdet_s = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let mahal = innov.dot(&chol.solve(&innov));
        out.log_likelihood += -0.5 * (p * LN_2PI + logdet_s + mahal);

        out.pred_mean.push(m_pred);
        out.pred_cov.push(p_pred);
        out.filt_mean.push(m_filt);
        out.filt_cov.push(p_filt);
        out.gains.push(gain);
    }
    Ok(out)
}

/// Backward RTS pass producing smoothed and lag-one moments.
pub fn rts_smoother(spec: &LgssmSpec, filt: &FilterOutput) -> Result<SmootherMoments> {
    let t_len = filt.filt_mean.len();
    let mut m_hat = filt.filt_mean.clone();
    let mut p_hat = filt.filt_cov.clone();
    let mut gains_j: Vec<DMatrix<f64>> = Vec::with_capacity(t_len.saturating_sub(1));
    for t in (1..t_len).rev() {
        let chol = nalgebra::Cholesky::new(filt.pred_cov[t].clone())
            .ok_or_else(|| AvemError::Singular(format!("predicted covariance at t={}", t + 1)))?;
        // J = P_f Gᵀ P_pred⁻¹  ⇔  Jᵀ = P_pred⁻¹ G P_f
        let j = chol.solve(&(&spec.g * &filt.filt_cov[t - 1])).transpose();
        let m = &filt.filt_mean[t - 1] + &j * (&m_hat[t] - &filt.pred_mean[t]);
        let mut pc = &filt.filt_cov[t - 1] + &j * (&p_hat[t] - &filt.pred_cov[t]) * j.transpose();
        symmetrize(&mut pc);
        m_hat[t - 1] = m;
        p_hat[t - 1] = pc;
        gains_j.push(j);
    }
    gains_j.reverse();
    let p_lag: Vec<DMatrix<f64>> = (1..t_len).map(|t| &p_hat[t] * gains_j[t - 1].transpose()).collect();
    let mut moments = SmootherMoments {
        m_hat,
        p_hat,
        p_lag,
        q_hat: Vec::new(),
        q_lag: Vec::new(),
        log_likelihood: filt.log_likelihood,
    };
    moments.refresh_second_moments();
    Ok(moments)
}

pub fn smooth(spec: &LgssmSpec, obs: &DMatrix<f64>) -> Result<SmootherMoments> {
    let filt = kalman_filter(spec, obs)?;
    rts_smoother(spec, &filt)
}

/// Exact joint posterior of the stacked state `(U_1, …, U_T)` by dense
/// Gaussian conditioning. Returns the `Tq` mean and `Tq × Tq` covariance.
pub fn dense_joint_oracle(spec: &LgssmSpec, obs: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    spec.validate()?;
    let (t_len, q, p) = (obs.nrows(), spec.state_dim(), spec.obs_dim());
    if t_len * q > 200 {
        return Err(AvemError::SizeGuard(format!("T*q = {} exceeds 200", t_len * q)));
    }
    let n = t_len * q;
    // prior mean and marginal covariances
    let mut mean = DVector::zeros(n);
    let mut marg = Vec::with_capacity(t_len);
    let mut m = spec.m0.clone();
    let mut v = spec.p0.clone();
    for t in 0..t_len {
        if t > 0 {
            m = &spec.g * &m;
            v = &spec.g * &v * spec.g.transpose() + DMatrix::identity(q, q);
        }
        mean.rows_mut(t * q, q).copy_from(&m);
        marg.push(v.clone());
    }
    let mut cov = DMatrix::zeros(n, n);
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
    let mut hb = DMatrix::zeros(t_len * p, n);
    let mut rb = DMatrix::zeros(t_len * p, t_len * p);
    let mut y = DVector::zeros(t_len * p);
    for t in 0..t_len {
        hb.view_mut((t * p, t * q), (p, q)).copy_from(&spec.h);
        for j in 0..p {
            rb[(t * p + j, t * p + j)] = spec.r[j];
            y[t * p + j] = obs[(t, j)];
        }
    }
    let s = &hb * &cov * hb.transpose() + rb;
    let chol = cholesky(&s, "dense innovation covariance")?;
    let ch = &cov * hb.transpose();
    let post_mean = &mean + &ch * chol.solve(&(y - &hb * &mean));
    let mut post_cov = &cov - &ch * chol.solve(&ch.transpose());
    symmetrize(&mut post_cov);
    Ok((post_mean, post_cov))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_spec(g: f64, h: f64, r: f64) -> LgssmSpec {
        LgssmSpec {
            g: DMatrix::from_element(1, 1, g),
            h: DMatrix::from_element(1, 1, h),
            r: DVector::from_element(1, r),
            m0: DVector::zeros(1),
            p0: DMatrix::identity(1, 1),
        }
    }

    #[test]
    fn independent_scalar_updates() {
        let r = 0.5;
        let spec = scalar_spec(0.0, 1.0, r);
        let obs = DMatrix::from_column_slice(4, 1, &[1.0, -2.0, 0.5, 3.0]);
        let f = kalman_filter(&spec, &obs).unwrap();
        for t in 0..4 {
            assert!((f.filt_mean[t][0] - obs[(t, 0)] / (1.0 + r)).abs() < 1e-14);
            assert!((f.filt_cov[t][(0, 0)] - r / (1.0 + r)).abs() < 1e-14);
        }
        let s = rts_smoother(&spec, &f).unwrap();
        for t in 0..4 {
            assert!((s.m_hat[t][0] - f.filt_mean[t][0]).abs() < 1e-15);
        }
        assert!(s.p_lag.iter().all(|p| p[(0, 0)] == 0.0));
    }

    #[test]
    fn zero_loading_ignores_data() {
        let spec = LgssmSpec {
            g: DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.0, 0.3]),
            h: DMatrix::zeros(3, 2),
            r: DVector::from_element(3, 1.0),
            m0: DVector::from_vec(vec![1.0, -1.0]),
            p0: DMatrix::identity(2, 2),
        };
        let obs = DMatrix::from_fn(3, 3, |i, j| (i + 2 * j) as f64);
        let f = kalman_filter(&spec, &obs).unwrap();
        for t in 0..3 {
            assert_eq!(f.filt_mean[t], f.pred_mean[t]);
            assert_eq!(f.filt_cov[t], f.pred_cov[t]);
        }
    }

    #[test]
    fn single_step_oracle_is_bayes_update() {
        let spec = scalar_spec(0.7, 2.0, 0.25);
        let obs = DMatrix::from_element(1, 1, 1.3);
        let (m, c) = dense_joint_oracle(&spec, &obs).unwrap();
        // precision 1 + 4/0.25 = 17, mean = (2 * 1.3 / 0.25) / 17
        assert!((c[(0, 0)] - 1.0 / 17.0).abs() < 1e-14);
        assert!((m[0] - (2.0 * 1.3 / 0.25) / 17.0).abs() < 1e-14);
    }

    #[test]
    fn oracle_size_guard() {
        let spec = scalar_spec(0.5, 1.0, 1.0);
        let obs = DMatrix::zeros(201, 1);
        assert!(matches!(dense_joint_oracle(&spec, &obs), Err(AvemError::SizeGuard(_))));
    }

    #[test]
    fn zero_mean_second_moment_equals_covariance() {
        let spec = scalar_spec(0.5, 1.0, 1.0);
        let obs = DMatrix::zeros(5, 1);
        let s = smooth(&spec, &obs).unwrap();
        for t in 0..5 {
            assert_eq!(s.q_hat[t], s.p_hat[t]);
        }
    }
}

//! Homogeneous linear-Gaussian state-space EM (all subjects share `G`, `H`),
//! used to initialize the mixed-effects fit.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::data::Sequence;
use crate::error::{AvemError, Result};
use crate::kalman::{smooth, LgssmSpec, SmootherMoments};
use crate::linalg::{cholesky, symmetrized};
use crate::par::{self, Parallelism};
use crate::report::relative_change;

#[derive(Debug, Clone, PartialEq)]
pub struct ReducedFit {
    pub spec: LgssmSpec,
    /// Log-likelihood at the start of each EM iteration.
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
}

/// Starting point from the pooled sample covariance: top-`q` principal
/// directions rotated to lower-trapezoidal form, `G = I/2`, `m0 = 0`, `P0 = I`.
pub fn pca_start(data: &[Sequence], q: usize) -> Result<LgssmSpec> {
    let p = data.first().map(Sequence::obs_dim).ok_or_else(|| AvemError::InvalidParameter("empty dataset".into()))?;
    if q == 0 || p < q {
        return Err(AvemError::InvalidParameter(format!("need p >= q >= 1, got p={p}, q={q}")));
    }
    let mut mean = DVector::zeros(p);
    let mut count = 0.0;
    for seq in data {
        for t in 0..seq.len() {
            mean += DVector::from_column_slice(seq.row(t));
            count += 1.0;
        }
    }
    mean /= count;
    let mut cov = DMatrix::zeros(p, p);
    for seq in data {
        for t in 0..seq.len() {
            let c = DVector::from_column_slice(seq.row(t)) - &mean;
            cov += &c * c.transpose();
        }
    }
    cov /= count;
    let eig = SymmetricEigen::new(symmetrized(cov.clone()));
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let noise = if p > q {
        order[q..].iter().map(|&i| eig.eigenvalues[i]).sum::<f64>() / (p - q) as f64
    } else {
        0.1 * eig.eigenvalues[order[q - 1]]
    };
    // stationary state variance under G = I/2 and unit noise
    let state_var = 1.0 / (1.0 - 0.25);
    let mut h = DMatrix::zeros(p, q);
    for (c, &i) in order[..q].iter().enumerate() {
        let scale = ((eig.eigenvalues[i] - noise).max(1e-3 * eig.eigenvalues[i].max(1e-12)) / state_var).sqrt();
        h.set_column(c, &(eig.eigenvectors.column(i) * scale));
    }
    let qr = h.transpose().qr();
    let mut l = qr.r().transpose();
    for c in 0..q {
        if l[(c, c)] < 0.0 {
            let neg = -l.column(c);
            l.set_column(c, &neg);
        }
    }
    let hh = &l * l.transpose() * state_var;
    let r = DVector::from_fn(p, |j, _| (cov[(j, j)] - hh[(j, j)]).max(0.05 * cov[(j, j)]).max(1e-6));
    Ok(LgssmSpec { g: DMatrix::identity(q, q) * 0.5, h: l, r, m0: DVector::zeros(q), p0: DMatrix::identity(q, q) })
}

/// One M-step of homogeneous EM from pooled smoother moments.
fn reduced_m_step(data: &[Sequence], moments: &[SmootherMoments], prev: &LgssmSpec) -> Result<LgssmSpec> {
    let (p, q) = (prev.obs_dim(), prev.state_dim());
    let n = data.len() as f64;
    let mut s_prev = DMatrix::zeros(q, q);
    let mut s_lag = DMatrix::zeros(q, q);
    let mut s_all = DMatrix::zeros(q, q);
    let mut cross = DMatrix::zeros(p, q);
    let mut sum_d2 = DVector::zeros(p);
    let mut total_t = 0.0;
    let mut m0 = DVector::zeros(q);
    for (seq, mom) in data.iter().zip(moments) {
        for t in 0..seq.len() {
            if t > 0 {
                s_prev += &mom.q_hat[t - 1];
                s_lag += &mom.q_lag[t - 1];
            }
            s_all += &mom.q_hat[t];
            let y = DVector::from_column_slice(seq.row(t));
            cross += &y * mom.m_hat[t].transpose();
            sum_d2 += y.component_mul(&y);
        }
        total_t += seq.len() as f64;
        m0 += &mom.m_hat[0];
    }
    m0 /= n;
    let mut p0 = DMatrix::zeros(q, q);
    for mom in moments {
        let c = &mom.m_hat[0] - &m0;
        p0 += &mom.p_hat[0] + &c * c.transpose();
    }
    let p0 = symmetrized(p0 / n);

    let g = if s_prev.iter().any(|v| *v != 0.0) {
        // G = S_lag S_prev⁻¹  ⇔  Gᵀ = S_prev⁻¹ S_lagᵀ
        cholesky(&symmetrized(s_prev), "pooled lagged second moment")?.solve(&s_lag.transpose()).transpose()
    } else {
        prev.g.clone()
    };

    let mut h = DMatrix::zeros(p, q);
    let mut r = DVector::zeros(p);
    for j in 0..p {
        let f = (j + 1).min(q);
        let a = symmetrized(s_all.view((0, 0), (f, f)).into_owned());
        let b = cross.view((j, 0), (1, f)).transpose();
        let row = cholesky(&a, "pooled state second moment")?.solve(&b);
        for c in 0..f {
            h[(j, c)] = row[c];
        }
        let hj = h.row(j).transpose();
        let val = sum_d2[j] - 2.0 * hj.dot(&cross.row(j).transpose()) + (hj.transpose() * &s_all * &hj)[(0, 0)];
        r[j] = (val / total_t).max(1e-8);
    }
    Ok(LgssmSpec { g, h, r, m0, p0 })
}

/// Maximum-likelihood EM for the shared-parameter model.
pub fn fit_reduced_lgssm(
    data: &[Sequence],
    start: LgssmSpec,
    max_iter: usize,
    rel_tol: f64,
    parallelism: Parallelism,
) -> Result<ReducedFit> {
    start.validate()?;
    let mats: Vec<DMatrix<f64>> = data.iter().map(Sequence::to_matrix).collect();
    let mut spec = start;
    let mut trace = Vec::new();
    let mut converged = false;
    for _ in 0..max_iter {
        let moments = par::try_map(parallelism, &mats, |_, d| smooth(&spec, d))?;
        let ll: f64 = moments.iter().map(|m| m.log_likelihood).sum();
        if !ll.is_finite() {
            return Err(AvemError::NonFinite("reduced-model log-likelihood".into()));
        }
        if let Some(&prev) = trace.last() {
            if relative_change(prev, ll) < rel_tol {
                trace.push(ll);
                converged = true;
                break;
            }
        }
        trace.push(ll);
        spec = reduced_m_step(data, &moments, &spec)?;
    }
    Ok(ReducedFit { spec, loglik_trace: trace, converged })
}

//! Gauss–Hermite rules for expectations under Gaussian laws.
//!
//! Rules are built for the standard normal weight (probabilists' Hermite
//! polynomials) so that `Σ w_j g(z_j) ≈ E[g(Z)]`, `Z ~ N(0, 1)`, with weights
//! summing to one. Nodes come from the Golub–Welsch eigenproblem, refined by
//! Newton steps on the orthonormal recurrence; weights use the Christoffel
//! function `1 / Σ_k φ_k(z)²`, which stays accurate for large rules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{AvemError, Result};

/// One-dimensional rule for `N(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Orthonormal probabilists' Hermite values `φ_0..φ_n` at `x`.
fn orthonormal_hermite(n: usize, x: f64) -> Vec<f64> {
    let mut phi = Vec::with_capacity(n + 1);
    phi.push(1.0);
    if n >= 1 {
        phi.push(x);
    }
    for k in 1..n {
        let next = (x * phi[k] - (k as f64).sqrt() * phi[k - 1]) / ((k + 1) as f64).sqrt();
        phi.push(next);
    }
    phi
}

impl GaussHermite {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(AvemError::InvalidParameter("Gauss-Hermite rule needs n >= 1".into()));
        }
        if n == 1 {
            return Ok(Self { nodes: vec![0.0], weights: vec![1.0] });
        }
        let mut jacobi = DMatrix::<f64>::zeros(n, n);
        for k in 1..n {
            let b = (k as f64).sqrt();
            jacobi[(k - 1, k)] = b;
            jacobi[(k, k - 1)] = b;
        }
        let eig = SymmetricEigen::new(jacobi);
        let mut nodes: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        nodes.sort_by(|a, b| a.partial_cmp(b).unwrap());

        for x in nodes.iter_mut() {
            for _ in 0..8 {
                let phi = orthonormal_hermite(n, *x);
                let deriv = (n as f64).sqrt() * phi[n - 1];
                if deriv == 0.0 {
                    break;
                }
                let step = phi[n] / deriv;
                *x -= step;
                if step.abs() < 1e-15 * (1.0 + x.abs()) {
                    break;
                }
            }
        }
        // exact symmetry of the rule
        for j in 0..n / 2 {
            let m = 0.5 * (nodes[n - 1 - j] - nodes[j]);
            nodes[j] = -m;
            nodes[n - 1 - j] = m;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }

        let mut weights: Vec<f64> = nodes
            .iter()
            .map(|&x| 1.0 / orthonormal_hermite(n - 1, x).iter().map(|p| p * p).sum::<f64>())
            .collect();
        let total: f64 = weights.iter().sum();
        for w in weights.iter_mut() {
            *w /= total;
        }
        Ok(Self { nodes, weights })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Tensor-product rule in `d` dimensions: standard-normal nodes (`J^d × d`)
    /// and their weights.
    pub fn tensor(&self, d: usize) -> Result<(DMatrix<f64>, Vec<f64>)> {
        let j = self.len();
        let total = (j as u128).checked_pow(d as u32).filter(|&t| t <= 1_000_000);
        let total = total.ok_or_else(|| {
            AvemError::SizeGuard(format!("{j}^{d} tensor nodes exceeds 1e6"))
        })? as usize;
        let mut nodes = DMatrix::zeros(total, d);
        let mut weights = vec![1.0; total];
        for row in 0..total {
            let mut rem = row;
            for c in 0..d {
                let idx = rem % j;
                rem /= j;
                nodes[(row, c)] = self.nodes[idx];
                weights[row] *= self.weights[idx];
            }
        }
        Ok((nodes, weights))
    }

    /// Nodes of the tensor rule mapped to `N(mean, cov)` via `mean + L z`.
    pub fn gaussian_nodes(
        &self,
        mean: &DVector<f64>,
        cov: &DMatrix<f64>,
    ) -> Result<(Vec<DVector<f64>>, Vec<f64>)> {
        let d = mean.len();
        let l = crate::linalg::cholesky(cov, "quadrature covariance")?.l();
        let (z, w) = self.tensor(d)?;
        let pts = (0..z.nrows())
            .map(|r| mean + &l * z.row(r).transpose())
            .collect();
        Ok((pts, w))
    }
}

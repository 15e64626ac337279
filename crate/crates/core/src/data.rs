use nalgebra::DMatrix;

use crate::error::{AvemError, Result};

/// One subject's observed sequence, `T × p`, stored row-major so that the
/// history `D_{1:t-1}` is a contiguous prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    obs_dim: usize,
    values: Vec<f64>,
}

/// View of a single time step handed to emission models.
#[derive(Debug, Clone, Copy)]
pub struct Step<'a> {
    /// Zero-based time index.
    pub t: usize,
    pub obs: &'a [f64],
    /// Rows `0..t`, flattened row-major.
    pub history: &'a [f64],
}

impl Sequence {
    pub fn new(obs_dim: usize, values: Vec<f64>) -> Result<Self> {
        if obs_dim == 0 || values.is_empty() || values.len() % obs_dim != 0 {
            return Err(AvemError::InvalidParameter(format!(
                "sequence of {} values cannot be split into rows of {obs_dim}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(AvemError::NonFinite("observation".into()));
        }
        Ok(Self { obs_dim, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let p = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != p) {
            return Err(AvemError::InvalidParameter("ragged observation rows".into()));
        }
        Self::new(p, rows.concat())
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Result<Self> {
        let values = (0..m.nrows()).flat_map(|t| m.row(t).iter().copied().collect::<Vec<_>>()).collect();
        Self::new(m.ncols(), values)
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.obs_dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.obs_dim..(t + 1) * self.obs_dim]
    }

    pub fn step(&self, t: usize) -> Step<'_> {
        Step { t, obs: self.row(t), history: &self.values[..t * self.obs_dim] }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.len(), self.obs_dim, &self.values)
    }

    /// First `t` steps.
    pub fn truncated(&self, t: usize) -> Result<Self> {
        Self::new(self.obs_dim, self.values[..t.min(self.len()) * self.obs_dim].to_vec())
    }
}

/// Total number of time points across subjects.
pub fn total_steps(data: &[Sequence]) -> usize {
    data.iter().map(Sequence::len).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_exposes_history_prefix() {
        let s = Sequence::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let st = s.step(2);
        assert_eq!(st.obs, &[5.0, 6.0]);
        assert_eq!(st.history, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.to_matrix()[(1, 0)], 3.0);
        assert_eq!(Sequence::from_matrix(&s.to_matrix()).unwrap(), s);
    }

    #[test]
    fn rejects_ragged_and_nan() {
        assert!(Sequence::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
        assert!(Sequence::new(1, vec![f64::NAN]).is_err());
    }
}

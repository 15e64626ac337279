use nalgebra::DMatrix;

use super::MhmmParams;
use crate::data::Sequence;
use crate::emission::{BernoulliEmission, GaussianEmission};
use crate::error::{AvemError, Result};
use crate::hmm::ChainParams;

const INIT_STICKINESS: f64 = 0.8;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's k-means seeded deterministically: the first center is the point
/// nearest the pooled mean, each next one the point farthest from the
/// centers chosen so far. Centers come back sorted by first coordinate,
/// descending.
pub fn kmeans_farthest_point(points: &[&[f64]], k: usize, max_iter: usize) -> Result<DMatrix<f64>> {
    if points.len() < k || k == 0 {
        return Err(AvemError::InvalidParameter(format!("k-means needs at least {k} points")));
    }
    let p = points[0].len();
    let mut mean = vec![0.0; p];
    for x in points {
        for j in 0..p {
            mean[j] += x[j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= points.len() as f64);

    let argmin = |f: &dyn Fn(&[f64]) -> f64| {
        let mut best = (0, f64::INFINITY);
        for (i, x) in points.iter().enumerate() {
            let v = f(x);
            if v < best.1 {
                best = (i, v);
            }
        }
        best.0
    };
    let mut centers: Vec<Vec<f64>> = vec![points[argmin(&|x| sq_dist(x, &mean))].to_vec()];
    while centers.len() < k {
        let far = argmin(&|x| -centers.iter().map(|c| sq_dist(x, c)).fold(f64::INFINITY, f64::min));
        centers.push(points[far].to_vec());
    }

    let mut assign = vec![usize::MAX; points.len()];
    for _ in 0..max_iter {
        let mut changed = false;
        for (i, x) in points.iter().enumerate() {
            let mut best = (0, f64::INFINITY);
            for (c, center) in centers.iter().enumerate() {
                let v = sq_dist(x, center);
                if v < best.1 {
                    best = (c, v);
                }
            }
            if assign[i] != best.0 {
                assign[i] = best.0;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; p]; k];
        let mut counts = vec![0usize; k];
        for (x, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for j in 0..p {
                sums[a][j] += x[j];
            }
        }
        for c in 0..k {
            // an emptied cluster keeps its old center
            if counts[c] > 0 {
                for j in 0..p {
                    centers[c][j] = sums[c][j] / counts[c] as f64;
                }
            }
        }
    }
    centers.sort_by(|a, b| b[0].total_cmp(&a[0]));
    Ok(DMatrix::from_fn(k, p, |c, j| centers[c][j]))
}

/// Starting values for a Gaussian MHMM: uniform `π`, sticky `Γ` (diagonal
/// 0.8), k-means state means, pooled variance, `Σ = I`.
pub fn init_gaussian(data: &[Sequence], k: usize) -> Result<MhmmParams<GaussianEmission>> {
    let rows: Vec<&[f64]> = data.iter().flat_map(|s| (0..s.len()).map(move |t| s.row(t))).collect();
    if rows.is_empty() {
        return Err(AvemError::InvalidParameter("empty dataset".into()));
    }
    let p = rows[0].len();
    let mu = kmeans_farthest_point(&rows, k, 100)?;
    let n = rows.len() as f64;
    let mut var = 0.0;
    for j in 0..p {
        let m = rows.iter().map(|r| r[j]).sum::<f64>() / n;
        var += rows.iter().map(|r| (r[j] - m) * (r[j] - m)).sum::<f64>() / n;
    }
    let var = (var / p as f64).max(1e-6);
    MhmmParams::new(
        ChainParams::sticky(k, INIT_STICKINESS),
        GaussianEmission::new(mu, vec![var; k])?,
        DMatrix::identity(p, p),
    )
}

/// Starting values for a Bernoulli MHMM: intercepts spread evenly over
/// `logit(p̄) ± 1`, descending.
pub fn init_bernoulli(data: &[Sequence], k: usize) -> Result<MhmmParams<BernoulliEmission>> {
    if data.is_empty() || k == 0 {
        return Err(AvemError::InvalidParameter("empty dataset or K = 0".into()));
    }
    let (mut ones, mut total) = (0.0, 0.0);
    for s in data {
        ones += s.values().iter().sum::<f64>();
        total += s.len() as f64;
    }
    let pbar = (ones / total).clamp(1e-3, 1.0 - 1e-3);
    let base = (pbar / (1.0 - pbar)).ln();
    let beta = (0..k)
        .map(|s| if k == 1 { base } else { base + 1.0 - 2.0 * s as f64 / (k - 1) as f64 })
        .collect();
    MhmmParams::new(ChainParams::sticky(k, INIT_STICKINESS), BernoulliEmission::new(beta)?, DMatrix::identity(1, 1))
}

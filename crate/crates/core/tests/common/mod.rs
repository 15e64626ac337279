#![allow(dead_code)]

use avem::hmm::ChainParams;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn simplex_row(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 0.05).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

pub fn random_chain(rng: &mut ChaCha8Rng, k: usize) -> ChainParams {
    let pi = simplex_row(rng, k);
    let mut gamma = DMatrix::zeros(k, k);
    for a in 0..k {
        for (b, v) in simplex_row(rng, k).into_iter().enumerate() {
            gamma[(a, b)] = v;
        }
    }
    ChainParams { pi, gamma }
}

/// All `K^T` paths as index vectors.
pub fn all_paths(k: usize, t_len: usize) -> Vec<Vec<usize>> {
    let total = k.pow(t_len as u32);
    (0..total)
        .map(|mut idx| {
            (0..t_len)
                .map(|_| {
                    let s = idx % k;
                    idx /= k;
                    s
                })
                .collect()
        })
        .collect()
}

/// `log p(U = path, D)` under `log_e`.
pub fn path_log_joint(chain: &ChainParams, e: &DMatrix<f64>, path: &[usize]) -> f64 {
    let mut v = chain.pi[path[0]].ln() + e[(0, path[0])];
    for t in 1..path.len() {
        v += chain.gamma[(path[t - 1], path[t])].ln() + e[(t, path[t])];
    }
    v
}

pub fn max_abs(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Plain Baum–Welch for a scalar Gaussian HMM with scaled recursions.
/// Returns `(pi, gamma, mu, sigma2)` after `iters` iterations.
pub fn baum_welch_1d(
    data: &[Vec<f64>],
    mut pi: Vec<f64>,
    mut gamma: DMatrix<f64>,
    mut mu: Vec<f64>,
    mut s2: Vec<f64>,
    iters: usize,
) -> (Vec<f64>, DMatrix<f64>, Vec<f64>, Vec<f64>) {
    let k = pi.len();
    for _ in 0..iters {
        let mut pi_acc = vec![0.0; k];
        let mut trans = DMatrix::<f64>::zeros(k, k);
        let mut occ = vec![0.0; k];
        let mut sum_y = vec![0.0; k];
        let mut sum_occ_all = vec![0.0; k];
        let mut post_all = Vec::new();
        for y in data {
            let t_len = y.len();
            let dens = |t: usize, s: usize| {
                let r = y[t] - mu[s];
                (-0.5 * r * r / s2[s]).exp() / (2.0 * std::f64::consts::PI * s2[s]).sqrt()
            };
            let mut a = DMatrix::<f64>::zeros(t_len, k);
            let mut c = vec![0.0; t_len];
            for s in 0..k {
                a[(0, s)] = pi[s] * dens(0, s);
            }
            c[0] = a.row(0).sum();
            for s in 0..k {
                a[(0, s)] /= c[0];
            }
            for t in 1..t_len {
                for s in 0..k {
                    a[(t, s)] = (0..k).map(|l| a[(t - 1, l)] * gamma[(l, s)]).sum::<f64>() * dens(t, s);
                }
                c[t] = a.row(t).sum();
                for s in 0..k {
                    a[(t, s)] /= c[t];
                }
            }
            let mut b = DMatrix::<f64>::from_element(t_len, k, 1.0);
            for t in (0..t_len - 1).rev() {
                for s in 0..k {
                    b[(t, s)] = (0..k).map(|l| gamma[(s, l)] * dens(t + 1, l) * b[(t + 1, l)]).sum::<f64>() / c[t + 1];
                }
            }
            let post = a.component_mul(&b);
            for s in 0..k {
                pi_acc[s] += post[(0, s)];
            }
            for t in 0..t_len - 1 {
                for s in 0..k {
                    occ[s] += post[(t, s)];
                    for l in 0..k {
                        trans[(s, l)] += a[(t, s)] * gamma[(s, l)] * dens(t + 1, l) * b[(t + 1, l)] / c[t + 1];
                    }
                }
            }
            for t in 0..t_len {
                for s in 0..k {
                    sum_y[s] += post[(t, s)] * y[t];
                    sum_occ_all[s] += post[(t, s)];
                }
            }
            post_all.push(post);
        }
        let n = data.len() as f64;
        pi = pi_acc.iter().map(|v| v / n).collect();
        for s in 0..k {
            for l in 0..k {
                gamma[(s, l)] = trans[(s, l)] / occ[s];
            }
        }
        mu = (0..k).map(|s| sum_y[s] / sum_occ_all[s]).collect();
        let mut sse = vec![0.0; k];
        for (y, post) in data.iter().zip(&post_all) {
            for t in 0..y.len() {
                for s in 0..k {
                    sse[s] += post[(t, s)] * (y[t] - mu[s]).powi(2);
                }
            }
        }
        s2 = (0..k).map(|s| sse[s] / sum_occ_all[s]).collect();
    }
    (pi, gamma, mu, s2)
}

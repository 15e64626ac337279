use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::DVector;

/// Output of every fitting routine.
#[derive(Debug, Clone, PartialEq)]
pub struct FitReport<P, Q> {
    pub params: P,
    pub q_factors: Vec<Q>,
    /// Anchor used at the final iteration, one per subject.
    pub anchors: Vec<DVector<f64>>,
    /// Objective after each iteration (anchored ELBO, or the node-approximated
    /// log-likelihood for exact EM).
    pub elbo_trace: Vec<f64>,
    pub n_iter: usize,
    pub wall_time_seconds: f64,
    /// Forward–backward (or filter/smoother) passes spent in each iteration.
    pub passes_per_iter: Vec<usize>,
    pub warnings: Vec<String>,
    pub converged: bool,
    /// Total number of time points, used to normalize the trace.
    pub total_steps: usize,
}

impl<P, Q> FitReport<P, Q> {
    pub fn normalized_trace(&self) -> Vec<f64> {
        let nt = self.total_steps.max(1) as f64;
        self.elbo_trace.iter().map(|v| v / nt).collect()
    }
}

/// Thread-safe count of inference passes.
#[derive(Debug, Default)]
pub struct PassCounter(AtomicUsize);

impl PassCounter {
    pub fn add(&self, n: usize) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }

    /// Returns the count and resets it.
    pub fn take(&self) -> usize {
        self.0.swap(0, Ordering::Relaxed)
    }
}

/// `|new − old| / max(|old|, 1e-300)`.
pub fn relative_change(old: f64, new: f64) -> f64 {
    (new - old).abs() / old.abs().max(1e-300)
}

pub(crate) fn push_warning(warnings: &mut Vec<String>, msg: String) {
    if !warnings.contains(&msg) {
        warnings.push(msg);
    }
}

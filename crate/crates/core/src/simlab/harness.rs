use serde::{Deserialize, Serialize};

use super::gen::generate;
use super::score::{score, FittedModel, ReplicateResult};
use super::{derive_seed, ScenarioSpec};
use crate::exact_em::{fit_mcem, fit_qem, ExactEmConfig};
use crate::error::{AvemError, Result};
use crate::messm::{fit_messm, init_messm, MessmConfig};
use crate::mhmm::{fit_mhmm, init_bernoulli, init_gaussian, AvemConfig, EStepMethod};
use crate::par::{self, Parallelism};
use crate::partial::{fit_pavem, init_pavem};

/// One estimation method of a Monte Carlo comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum MethodSpec {
    /// Anchored variational EM; on the localized scenario both effects are anchored.
    Avem {
        #[serde(default)]
        e_step_method: Option<EStepMethod>,
    },
    /// Partial anchoring with `j` grid nodes over the localized effect.
    Pavem { j: usize },
    /// Gauss–Hermite exact EM with `j` nodes per effect dimension.
    Qem { j: usize },
    /// Monte Carlo EM with `m` prior draws per iteration.
    Mcem { m: usize },
}

impl MethodSpec {
    pub fn label(&self) -> String {
        match self {
            MethodSpec::Avem { e_step_method: None } => "avem".into(),
            MethodSpec::Avem { e_step_method: Some(m) } => format!("avem({m:?})").to_lowercase(),
            MethodSpec::Pavem { j } => format!("pavem(J={j})"),
            MethodSpec::Qem { j } => format!("qem(J={j})"),
            MethodSpec::Mcem { m } => format!("mcem(M={m})"),
        }
    }
}

/// Iteration controls shared by every method of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct FitSettings {
    pub max_iter: usize,
    pub rel_tol: f64,
    pub n_quad: usize,
    pub sign_align: bool,
    /// Parallelism across replicates; fits inside a replicate run sequentially.
    pub parallelism: Parallelism,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self { max_iter: 500, rel_tol: 1e-6, n_quad: 9, sign_align: true, parallelism: Parallelism::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    /// Index of the scenario within the grid.
    pub cell: usize,
    pub scenario: ScenarioSpec,
    pub replicate: usize,
    pub method: String,
    pub result: ReplicateResult,
    /// Set when the fit failed; metrics are then empty.
    pub error: Option<String>,
}

fn unsupported(spec: &ScenarioSpec, method: &MethodSpec) -> AvemError {
    AvemError::InvalidParameter(format!("method {} is not available for scenario {}", method.label(), spec.name()))
}

/// Checks that every method applies to the scenario.
pub fn check_methods(spec: &ScenarioSpec, methods: &[MethodSpec]) -> Result<()> {
    if methods.is_empty() {
        return Err(AvemError::InvalidParameter("at least one method is required".into()));
    }
    for m in methods {
        let ok = match (spec, m) {
            (_, MethodSpec::Avem { .. }) => true,
            (ScenarioSpec::GaussianMhmm(_) | ScenarioSpec::BernoulliMhmm(_), MethodSpec::Qem { .. } | MethodSpec::Mcem { .. }) => true,
            (ScenarioSpec::Localized(_), MethodSpec::Pavem { .. }) => true,
            _ => false,
        };
        if !ok {
            return Err(unsupported(spec, m));
        }
    }
    Ok(())
}

/// Fits one method to `data` with the model structure (state count, latent
/// dimension, cutoff) taken from `spec`. `inner` controls parallelism across
/// subjects within the fit.
pub fn fit_method(
    spec: &ScenarioSpec,
    data: &[crate::data::Sequence],
    method: &MethodSpec,
    settings: &FitSettings,
    seed: u64,
    inner: Parallelism,
) -> Result<FittedModel> {
    let avem = |e_step_method: Option<EStepMethod>| AvemConfig {
        max_iter: settings.max_iter,
        rel_tol: settings.rel_tol,
        e_step_method,
        n_quad: settings.n_quad,
        seed,
        parallelism: inner,
        sigma_fixed: false,
    };
    let exact = ExactEmConfig {
        max_iter: settings.max_iter,
        rel_tol: settings.rel_tol,
        fix_tau2: false,
        seed,
        parallelism: inner,
        n_quad: settings.n_quad,
    };
    match (spec, method) {
        (ScenarioSpec::GaussianMhmm(s), m) => {
            let init = init_gaussian(data, s.k)?;
            match m {
                MethodSpec::Avem { e_step_method } => Ok(FittedModel::Gaussian(fit_mhmm(data, &init, &avem(*e_step_method))?)),
                MethodSpec::Qem { j } => Ok(FittedModel::Gaussian(fit_qem(data, &init, *j, &exact)?)),
                MethodSpec::Mcem { m } => Ok(FittedModel::Gaussian(fit_mcem(data, &init, *m, &exact)?)),
                MethodSpec::Pavem { .. } => Err(unsupported(spec, method)),
            }
        }
        (ScenarioSpec::BernoulliMhmm(s), m) => {
            let init = init_bernoulli(data, s.beta.len())?;
            match m {
                MethodSpec::Avem { e_step_method } => Ok(FittedModel::Bernoulli(fit_mhmm(data, &init, &avem(*e_step_method))?)),
                MethodSpec::Qem { j } => Ok(FittedModel::Bernoulli(fit_qem(data, &init, *j, &exact)?)),
                MethodSpec::Mcem { m } => Ok(FittedModel::Bernoulli(fit_mcem(data, &init, *m, &exact)?)),
                MethodSpec::Pavem { .. } => Err(unsupported(spec, method)),
            }
        }
        (ScenarioSpec::Messm(s), MethodSpec::Avem { .. }) => {
            let cfg = MessmConfig {
                max_iter: settings.max_iter,
                rel_tol: settings.rel_tol,
                sign_align: settings.sign_align,
                parallelism: inner,
                seed,
                ..MessmConfig::default()
            };
            let init = init_messm(data, s.g.len(), &cfg)?;
            Ok(FittedModel::Messm(fit_messm(data, &init, &cfg)?))
        }
        (ScenarioSpec::Localized(s), MethodSpec::Pavem { j }) => {
            let init = init_pavem(data, s.mu.len(), s.t0)?;
            Ok(FittedModel::Pavem(fit_pavem(data, &init, *j, &avem(None))?))
        }
        (ScenarioSpec::Localized(s), MethodSpec::Avem { e_step_method }) => {
            let init = init_pavem(data, s.mu.len(), s.t0)?.to_fully_anchored()?;
            Ok(FittedModel::Localized(fit_mhmm(data, &init, &avem(*e_step_method))?))
        }
        _ => Err(unsupported(spec, method)),
    }
}

/// Seed under which the data of grid cell `cell` are generated.
pub fn cell_seed(master_seed: u64, cell: usize) -> u64 {
    derive_seed(master_seed, cell as u64, u64::MAX - 1)
}

/// Generates replicate `replicate` of `spec` (with its own seed) and fits
/// every method to the same data. Failed fits yield an error string.
pub fn run_replicate(
    spec: &ScenarioSpec,
    replicate: usize,
    methods: &[MethodSpec],
    settings: &FitSettings,
) -> Result<Vec<(String, ReplicateResult, Option<String>)>> {
    let ds = generate(spec, replicate as u64)?;
    let fit_seed = derive_seed(spec.seed(), replicate as u64, u64::MAX);
    Ok(methods
        .iter()
        .map(|m| match fit_method(spec, &ds.data, m, settings, fit_seed, Parallelism::Sequential).and_then(|f| score(&f, &ds.truth)) {
            Ok(r) => (m.label(), r, None),
            Err(e) => (m.label(), ReplicateResult::default(), Some(e.to_string())),
        })
        .collect())
}

/// Runs `n_reps` replicates of every grid cell with every method. Rows are
/// ordered by cell, replicate, then method.
pub fn run_monte_carlo(
    grid: &[ScenarioSpec],
    methods: &[MethodSpec],
    n_reps: usize,
    master_seed: u64,
    settings: &FitSettings,
) -> Result<Vec<ResultRow>> {
    for spec in grid {
        spec.validate()?;
        check_methods(spec, methods)?;
    }
    let jobs: Vec<(usize, usize)> = (0..grid.len()).flat_map(|c| (0..n_reps).map(move |r| (c, r))).collect();
    let results = par::try_map(settings.parallelism, &jobs, |_, &(c, r)| {
        let spec = grid[c].clone().with_seed(cell_seed(master_seed, c));
        run_replicate(&spec, r, methods, settings).map(|rows| (c, r, spec, rows))
    })?;
    let mut out = Vec::with_capacity(jobs.len() * methods.len());
    for (c, r, spec, rows) in results {
        for (method, result, error) in rows {
            out.push(ResultRow { cell: c, scenario: spec.clone(), replicate: r, method, result, error });
        }
    }
    Ok(out)
}

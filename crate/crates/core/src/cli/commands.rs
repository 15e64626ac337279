use std::path::Path;

use serde_json::json;

use super::config::Config;
use super::io::{self, Provenance};
use super::CliError;
use crate::oracle::{run_suite, SUITES};
use crate::par::Parallelism;
use crate::simlab::{derive_seed, fit_method, generate, run_monte_carlo, ScenarioSpec};

fn provenance(cfg: &Config) -> Provenance {
    Provenance { config_hash: cfg.hash(), master_seed: cfg.master_seed }
}

/// Generates replicate 0 of the base scenario under `master_seed` and writes
/// `dataset.csv`, `truth_states.csv`, `truth_effects.csv` and `truth.json`.
pub fn cmd_simulate(cfg: &Config, dir: &Path) -> Result<(), CliError> {
    let spec = cfg.scenario.clone().with_seed(cfg.master_seed);
    let ds = generate(&spec, 0).map_err(CliError::numerical)?;
    let prov = provenance(cfg);
    io::write_dataset(&dir.join("dataset.csv"), &prov, &ds.data)?;
    io::write_truth(dir, &prov, &ds.truth)
}

fn expected_obs_dim(spec: &ScenarioSpec) -> usize {
    match spec {
        ScenarioSpec::GaussianMhmm(s) => s.d,
        ScenarioSpec::BernoulliMhmm(_) | ScenarioSpec::Localized(_) => 1,
        ScenarioSpec::Messm(s) => s.h.len(),
    }
}

/// Fits every configured method to the dataset; writes `fit-<method>.json`
/// and `trace-<method>.csv` per method.
pub fn cmd_fit(cfg: &Config, data: &Path, dir: &Path, threads: usize, timings: bool) -> Result<(), CliError> {
    let (ids, seqs) = io::read_dataset(data)?;
    let p = expected_obs_dim(&cfg.scenario);
    if seqs[0].obs_dim() != p {
        return Err(CliError::config(format!(
            "dataset has {} observation columns but scenario {} expects {p}",
            seqs[0].obs_dim(),
            cfg.scenario.name()
        )));
    }
    let inner = if threads == 1 { Parallelism::Sequential } else { Parallelism::Rayon };
    let seed = derive_seed(cfg.master_seed, 0, u64::MAX);
    let prov = provenance(cfg);
    let settings = cfg.settings();
    for m in &cfg.methods {
        let fit = fit_method(&cfg.scenario, &seqs, m, &settings, seed, inner).map_err(CliError::numerical)?;
        let label = m.label();
        let slug = io::slug(&label);
        let doc = io::fit_json(&prov, &cfg.scenario, &label, &ids, &fit, timings);
        io::write_file(&dir.join(format!("fit-{slug}.json")), &io::pretty(&doc))?;
        io::write_trace(&dir.join(format!("trace-{slug}.csv")), &prov, &fit)?;
    }
    Ok(())
}

/// Runs the Monte Carlo grid and writes `results.csv`.
pub fn cmd_experiment(cfg: &Config, dir: &Path, timings: bool) -> Result<(), CliError> {
    let grid = cfg.grid()?;
    let rows = run_monte_carlo(&grid, &cfg.methods, cfg.experiment.n_reps, cfg.master_seed, &cfg.settings())
        .map_err(CliError::numerical)?;
    let text = io::results_csv(&provenance(cfg), &rows, timings)?;
    io::write_file(&dir.join("results.csv"), &text)
}

/// Runs an oracle suite; returns one JSON line per suite and whether all passed.
pub fn cmd_validate(suite: &str, seed: u64) -> Result<(String, bool), CliError> {
    if suite != "all" && !SUITES.contains(&suite) {
        return Err(CliError::config(format!("unknown suite '{suite}'; expected one of {SUITES:?} or all")));
    }
    let reports = run_suite(suite, seed).map_err(CliError::numerical)?;
    let mut out = String::new();
    for r in &reports {
        let line = json!({
            "suite": r.name,
            "instances": r.instances,
            "max_deviation": r.max_deviation,
            "tolerance": r.tolerance,
            "passed": r.passed(),
            "master_seed": seed,
        });
        out.push_str(&line.to_string());
        out.push('\n');
    }
    Ok((out, reports.iter().all(|r| r.passed())))
}

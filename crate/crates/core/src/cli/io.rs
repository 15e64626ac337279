//! File formats: dataset and truth CSVs, fit JSON, trace and result CSVs.
//! Every file starts with a provenance line (`# config_hash=… master_seed=…`
//! for CSV, top-level keys for JSON). Numbers use the shortest decimal that
//! parses back to the same `f64`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde_json::{json, Map, Value};

use super::CliError;
use crate::data::Sequence;
use crate::factor::QFactor;
use crate::hmm::ChainParams;
use crate::report::FitReport;
use crate::simlab::{FittedModel, ResultRow, ScenarioSpec, Truth};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub config_hash: String,
    pub master_seed: u64,
}

impl Provenance {
    fn header(&self) -> String {
        format!("# config_hash={} master_seed={}\n", self.config_hash, self.master_seed)
    }
}

pub fn num(x: f64) -> String {
    format!("{x}")
}

fn opt_num(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn csv_text(prov: &Provenance, header: &[String], rows: &[Vec<String>]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(CliError::csv)?;
    for r in rows {
        w.write_record(r).map_err(CliError::csv)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::csv(e.into_error().into()))?;
    Ok(prov.header() + &String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn write_csv(path: &Path, prov: &Provenance, header: &[String], rows: &[Vec<String>]) -> Result<(), CliError> {
    write_file(path, &csv_text(prov, header, rows)?)
}

/// Writes `subject_id, t, d1..dp` with `t` counted from 0.
pub fn write_dataset(path: &Path, prov: &Provenance, data: &[Sequence]) -> Result<(), CliError> {
    let p = data.first().map_or(1, Sequence::obs_dim);
    let mut header = vec!["subject_id".to_string(), "t".to_string()];
    header.extend((1..=p).map(|j| format!("d{j}")));
    let mut rows = Vec::new();
    for (i, seq) in data.iter().enumerate() {
        for t in 0..seq.len() {
            let mut r = vec![i.to_string(), t.to_string()];
            r.extend(seq.row(t).iter().map(|v| num(*v)));
            rows.push(r);
        }
    }
    write_csv(path, prov, &header, &rows)
}

fn data_err(path: &Path, msg: String) -> CliError {
    CliError { code: 4, kind: "io", message: format!("{}: {msg}", path.display()) }
}

/// Reads a dataset CSV. Rows of a subject must be contiguous with `t`
/// running 0, 1, 2, …; subjects keep their order of appearance.
pub fn read_dataset(path: &Path) -> Result<(Vec<String>, Vec<Sequence>), CliError> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| data_err(path, e.to_string()))?;
    let header = rdr.headers().map_err(|e| data_err(path, e.to_string()))?.clone();
    if header.len() < 3 || &header[0] != "subject_id" || &header[1] != "t" {
        return Err(data_err(path, "expected columns subject_id, t, d1..dp".into()));
    }
    let p = header.len() - 2;
    let mut ids: Vec<String> = Vec::new();
    let mut values: Vec<Vec<f64>> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| data_err(path, e.to_string()))?;
        let row = line + 2;
        let id = &rec[0];
        let t: usize = rec[1].parse().map_err(|_| data_err(path, format!("row {row}: bad t '{}'", &rec[1])))?;
        if ids.last().map(String::as_str) != Some(id) {
            if ids.iter().any(|x| x == id) {
                return Err(data_err(path, format!("row {row}: rows of subject {id} are not contiguous")));
            }
            ids.push(id.to_string());
            values.push(Vec::new());
        }
        let vals = values.last_mut().expect("subject pushed");
        if t != vals.len() / p {
            return Err(data_err(path, format!("row {row}: expected t = {}, found {t}", vals.len() / p)));
        }
        for j in 0..p {
            let v: f64 = rec[j + 2]
                .parse()
                .map_err(|_| data_err(path, format!("row {row}: bad value '{}'", &rec[j + 2])))?;
            vals.push(v);
        }
    }
    if ids.is_empty() {
        return Err(data_err(path, "no observations".into()));
    }
    let seqs = values
        .into_iter()
        .map(|v| Sequence::new(p, v))
        .collect::<crate::Result<Vec<_>>>()
        .map_err(|e| data_err(path, e.to_string()))?;
    Ok((ids, seqs))
}

fn mat(m: &DMatrix<f64>) -> Value {
    Value::Array((0..m.nrows()).map(|r| json!((0..m.ncols()).map(|c| m[(r, c)]).collect::<Vec<_>>())).collect())
}

fn vec_json(v: &DVector<f64>) -> Value {
    json!(v.as_slice())
}

fn chain_json(c: &ChainParams) -> Value {
    json!({ "pi": c.pi, "gamma": mat(&c.gamma) })
}

/// Writes the truth files of a simulated dataset next to it.
pub fn write_truth(dir: &Path, prov: &Provenance, truth: &Truth) -> Result<(), CliError> {
    let mut state_rows = Vec::new();
    let mut effect_rows = Vec::new();
    let (state_header, effect_header, population): (Vec<String>, Vec<String>, Value) = match truth {
        Truth::Gaussian(g) => {
            discrete_states(&g.states, &mut state_rows);
            let d = g.params.sigma.nrows();
            for (i, f) in g.effects.iter().enumerate() {
                effect_rows.push(std::iter::once(i.to_string()).chain(f.iter().map(|v| num(*v))).collect());
            }
            let pop = json!({
                "chain": chain_json(&g.params.chain),
                "mu": mat(&g.params.emission.mu),
                "sigma2": g.params.emission.sigma2,
                "sigma": mat(&g.params.sigma),
            });
            (names(&["subject_id", "t", "state"]), labelled("f", d), pop)
        }
        Truth::Bernoulli(b) => {
            discrete_states(&b.states, &mut state_rows);
            for (i, f) in b.effects.iter().enumerate() {
                effect_rows.push(vec![i.to_string(), num(f[0])]);
            }
            let pop = json!({
                "chain": chain_json(&b.params.chain),
                "beta": b.params.emission.beta,
                "sigma": mat(&b.params.sigma),
            });
            (names(&["subject_id", "t", "state"]), labelled("f", 1), pop)
        }
        Truth::Localized(l) => {
            discrete_states(&l.states, &mut state_rows);
            for i in 0..l.f_a.len() {
                effect_rows.push(vec![i.to_string(), num(l.f_a[i]), num(l.f_b[i])]);
            }
            let pop = json!({
                "chain": chain_json(&l.chain),
                "mu": l.mu,
                "sigma2": l.sigma2,
                "tau_a2": l.tau_a2,
                "tau_b2": l.tau_b2,
                "t0": l.t0,
            });
            (names(&["subject_id", "t", "state"]), names(&["subject_id", "f_a", "f_b"]), pop)
        }
        Truth::Messm(m) => {
            let q = m.g.nrows();
            let p = m.h.nrows();
            for (i, u) in m.states.iter().enumerate() {
                for t in 0..u.nrows() {
                    state_rows.push(
                        [i.to_string(), t.to_string()].into_iter().chain(u.row(t).iter().map(|v| num(*v))).collect(),
                    );
                }
            }
            for i in 0..m.g_i.len() {
                let mut r = vec![i.to_string()];
                r.extend(m.g_i[i].transpose().iter().map(|v| num(*v)));
                r.extend(m.h_i[i].transpose().iter().map(|v| num(*v)));
                effect_rows.push(r);
            }
            let mut sh = names(&["subject_id", "t"]);
            sh.extend((1..=q).map(|j| format!("u{j}")));
            let mut eh = names(&["subject_id"]);
            eh.extend((0..q * q).map(|x| format!("g_{}_{}", x / q + 1, x % q + 1)));
            eh.extend((0..p * q).map(|x| format!("h_{}_{}", x / q + 1, x % q + 1)));
            let pop = json!({
                "g": mat(&m.g),
                "h": mat(&m.h),
                "r": vec_json(&m.r),
                "sigma_g": m.sigma_g,
                "sigma_h": m.sigma_h,
            });
            (sh, eh, pop)
        }
    };
    write_csv(&dir.join("truth_states.csv"), prov, &state_header, &state_rows)?;
    write_csv(&dir.join("truth_effects.csv"), prov, &effect_header, &effect_rows)?;
    let doc = json!({
        "config_hash": prov.config_hash,
        "master_seed": prov.master_seed,
        "population": population,
    });
    write_file(&dir.join("truth.json"), &pretty(&doc))
}

fn names(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

fn labelled(prefix: &str, d: usize) -> Vec<String> {
    std::iter::once("subject_id".to_string()).chain((1..=d).map(|j| format!("{prefix}{j}"))).collect()
}

fn discrete_states(states: &[Vec<usize>], rows: &mut Vec<Vec<String>>) {
    for (i, s) in states.iter().enumerate() {
        for (t, k) in s.iter().enumerate() {
            rows.push(vec![i.to_string(), t.to_string(), k.to_string()]);
        }
    }
}

pub fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json serializes");
    s.push('\n');
    s
}

fn q_json(q: &QFactor) -> (Value, Value) {
    (vec_json(&q.nu), mat(&q.omega))
}

fn report_meta<P, Q>(r: &FitReport<P, Q>, timings: bool) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("n_iter".into(), json!(r.n_iter));
    m.insert("converged".into(), json!(r.converged));
    m.insert("total_steps".into(), json!(r.total_steps));
    m.insert("final_objective".into(), json!(r.elbo_trace.last()));
    m.insert("passes_per_iter".into(), json!(r.passes_per_iter));
    m.insert("warnings".into(), json!(r.warnings));
    if timings {
        m.insert("wall_time_seconds".into(), json!(r.wall_time_seconds));
    }
    m
}

fn mhmm_subjects(ids: &[String], qs: &[QFactor], anchors: &[DVector<f64>]) -> Value {
    Value::Array(
        ids.iter()
            .enumerate()
            .map(|(i, id)| {
                let (nu, omega) = q_json(&qs[i]);
                json!({ "id": id, "nu": nu, "omega": omega, "anchor": anchors.get(i).map(vec_json) })
            })
            .collect(),
    )
}

/// JSON document of one fit: parameters, per-subject factors and anchors,
/// iteration metadata.
pub fn fit_json(prov: &Provenance, scenario: &ScenarioSpec, method: &str, ids: &[String], fit: &FittedModel, timings: bool) -> Value {
    let (params, subjects, meta) = match fit {
        FittedModel::Gaussian(f) => (
            json!({
                "chain": chain_json(&f.params.chain),
                "mu": mat(&f.params.emission.mu),
                "sigma2": f.params.emission.sigma2,
                "sigma": mat(&f.params.sigma),
            }),
            mhmm_subjects(ids, &f.q_factors, &f.anchors),
            report_meta(f, timings),
        ),
        FittedModel::Bernoulli(f) => (
            json!({
                "chain": chain_json(&f.params.chain),
                "beta": f.params.emission.beta,
                "sigma": mat(&f.params.sigma),
            }),
            mhmm_subjects(ids, &f.q_factors, &f.anchors),
            report_meta(f, timings),
        ),
        FittedModel::Localized(f) => (
            json!({
                "chain": chain_json(&f.params.chain),
                "mu": f.params.emission.mu,
                "sigma2": f.params.emission.sigma2,
                "t0": f.params.emission.t0,
                "sigma": mat(&f.params.sigma),
            }),
            mhmm_subjects(ids, &f.q_factors, &f.anchors),
            report_meta(f, timings),
        ),
        FittedModel::Pavem(f) => {
            let b = &f.params.base;
            let subjects = ids
                .iter()
                .enumerate()
                .map(|(i, id)| {
                    let fac = &f.q_factors[i];
                    let (nu, omega) = q_json(&fac.q_a);
                    json!({
                        "id": id,
                        "nu_a": nu,
                        "omega_a": omega,
                        "anchor_a": f.anchors.get(i).map(vec_json),
                        "grid_nodes": fac.grid.nodes,
                        "grid_weights": fac.grid.weights,
                        "mean_b": fac.grid.mean(),
                    })
                })
                .collect();
            (
                json!({
                    "chain": chain_json(&b.chain),
                    "mu": mat(&b.emission.mu),
                    "sigma2": b.emission.sigma2,
                    "tau_a2": b.sigma[(0, 0)],
                    "tau_b2": f.params.tau_b2,
                    "t0": f.params.t0,
                }),
                Value::Array(subjects),
                report_meta(f, timings),
            )
        }
        FittedModel::Messm(f) => {
            let p = &f.params;
            let subjects = ids
                .iter()
                .enumerate()
                .map(|(i, id)| {
                    let e = &f.q_factors[i];
                    let (nu_g, omega_g) = q_json(&e.q_g);
                    let (nu_h, omega_h) = q_json(&e.q_h);
                    json!({
                        "id": id,
                        "nu_g": nu_g,
                        "omega_g": omega_g,
                        "nu_h": nu_h,
                        "omega_h": omega_h,
                        "anchor_g": vec_json(&e.g0),
                        "anchor_h": vec_json(&e.h0),
                    })
                })
                .collect();
            (
                json!({
                    "g": mat(&p.g_mean()),
                    "h": mat(&p.h_mean()),
                    "r": vec_json(&p.r),
                    "m0": vec_json(&p.m0),
                    "p0": mat(&p.p0),
                    "mu_g": vec_json(&p.mu_g),
                    "sigma_g": mat(&p.sigma_g),
                    "mu_h": vec_json(&p.mu_h),
                    "sigma_h": mat(&p.sigma_h),
                }),
                Value::Array(subjects),
                report_meta(f, timings),
            )
        }
    };
    let mut doc = Map::new();
    doc.insert("config_hash".into(), json!(prov.config_hash));
    doc.insert("master_seed".into(), json!(prov.master_seed));
    doc.insert("model".into(), json!(scenario.name()));
    doc.insert("method".into(), json!(method));
    doc.insert("params".into(), params);
    doc.insert("subjects".into(), subjects);
    doc.insert("metadata".into(), Value::Object(meta));
    Value::Object(doc)
}

pub fn trace_of(fit: &FittedModel) -> (Vec<f64>, Vec<f64>) {
    fn pair<P, Q>(r: &FitReport<P, Q>) -> (Vec<f64>, Vec<f64>) {
        (r.elbo_trace.clone(), r.normalized_trace())
    }
    match fit {
        FittedModel::Gaussian(f) => pair(f),
        FittedModel::Bernoulli(f) => pair(f),
        FittedModel::Localized(f) => pair(f),
        FittedModel::Pavem(f) => pair(f),
        FittedModel::Messm(f) => pair(f),
    }
}

/// `iteration, elbo, normalized_elbo`, iterations counted from 1.
pub fn write_trace(path: &Path, prov: &Provenance, fit: &FittedModel) -> Result<(), CliError> {
    let (raw, norm) = trace_of(fit);
    let rows: Vec<Vec<String>> =
        raw.iter().zip(&norm).enumerate().map(|(i, (a, b))| vec![(i + 1).to_string(), num(*a), num(*b)]).collect();
    write_csv(path, prov, &names(&["iteration", "elbo", "normalized_elbo"]), &rows)
}

fn scenario_axes(s: &ScenarioSpec) -> (usize, usize, Option<f64>) {
    match s {
        ScenarioSpec::GaussianMhmm(x) => (x.n, x.t, Some(x.tau2)),
        ScenarioSpec::BernoulliMhmm(x) => (x.n, x.t, Some(x.tau2)),
        ScenarioSpec::Messm(x) => (x.n, x.t, None),
        ScenarioSpec::Localized(x) => (x.n, x.t, None),
    }
}

/// Monte Carlo table, one row per (cell, replicate, method).
pub fn results_csv(prov: &Provenance, rows: &[ResultRow], timings: bool) -> Result<String, CliError> {
    let mut header = names(&[
        "cell", "replicate", "scenario", "n", "t", "tau2", "method", "rmse_mu", "rmse_sigma2", "gamma_abs_err", "mse_f",
        "mse_fb", "tau2_abs_err", "rmse_beta", "beta_order_ok", "rmse_g", "rmse_h", "rmse_r", "rmse_g_i", "rmse_h_i",
        "n_iter", "converged", "error",
    ]);
    if timings {
        header.push("wall_time_seconds".into());
    }
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let (n, t, tau2) = scenario_axes(&r.scenario);
            let x = &r.result;
            let mut out = vec![
                r.cell.to_string(),
                r.replicate.to_string(),
                r.scenario.name().to_string(),
                n.to_string(),
                t.to_string(),
                opt_num(tau2),
                r.method.clone(),
            ];
            out.extend(
                [x.rmse_mu, x.rmse_sigma2, x.gamma_abs_err, x.mse_f, x.mse_fb, x.tau2_abs_err, x.rmse_beta].map(opt_num),
            );
            out.push(x.beta_order_ok.map(|b| b.to_string()).unwrap_or_default());
            out.extend([x.rmse_g, x.rmse_h, x.rmse_r, x.rmse_g_i, x.rmse_h_i].map(opt_num));
            out.push(x.n_iter.to_string());
            out.push(x.converged.to_string());
            out.push(r.error.clone().unwrap_or_default());
            if timings {
                out.push(num(x.wall_time));
            }
            out
        })
        .collect();
    csv_text(prov, &header, &body)
}

/// Label usable in file names: `qem(J=9)` becomes `qem-j9`.
pub fn slug(label: &str) -> String {
    let mut s = String::new();
    for ch in label.chars() {
        match ch {
            '(' => s.push('-'),
            ')' | '=' => {}
            c => s.push(c.to_ascii_lowercase()),
        }
    }
    s
}

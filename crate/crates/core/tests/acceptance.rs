//! End-to-end acceptance checks. One line per criterion is printed; run with
//! `cargo test --test acceptance -- --nocapture` to see them.

mod common;

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use avem::exact_em::{fit_qem, ExactEmConfig};
use avem::hmm::StatePosterior;
use avem::messm::{fit_messm, init_messm, MessmConfig};
use avem::mhmm::{e_step_local, fit_mhmm, init_gaussian, update_q_closed_form, update_q_laplace, AvemConfig, EStepMethod};
use avem::oracle::{gaussian_estep_suite, hmm_suite, kalman_suite};
use avem::par::{self, Parallelism};
use avem::partial::{fit_pavem, init_pavem};
use avem::simlab::*;
use common::median;
use nalgebra::{DMatrix, DVector};
use tempfile::TempDir;

struct Outcome {
    id: usize,
    passed: bool,
    detail: String,
}

fn outcome(id: usize, passed: bool, detail: String) -> Outcome {
    println!("criterion {id:>2} {}: {detail}", if passed { "PASS" } else { "FAIL" });
    Outcome { id, passed, detail }
}

fn settings() -> FitSettings {
    FitSettings { parallelism: Parallelism::Rayon, ..FitSettings::default() }
}

/// Median of `metric` over rows of cell `cell` fitted by `method`.
fn cell_median(rows: &[ResultRow], cell: usize, method: &str, metric: impl Fn(&ReplicateResult) -> Option<f64>) -> f64 {
    let v: Vec<f64> = rows
        .iter()
        .filter(|r| r.cell == cell && r.method == method)
        .map(|r| {
            assert!(r.error.is_none(), "{} rep {}: {:?}", r.method, r.replicate, r.error);
            metric(&r.result).expect("metric applies")
        })
        .collect();
    assert!(!v.is_empty(), "no rows for cell {cell} method {method}");
    median(v)
}

/// Largest decrease between consecutive entries from 1-based iteration 3 on.
fn worst_drop(trace: &[f64]) -> f64 {
    (2..trace.len()).map(|i| trace[i - 1] - trace[i]).fold(f64::NEG_INFINITY, f64::max)
}

fn c1() -> Outcome {
    let start = Instant::now();
    let r = hmm_suite(100, 2024).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let ok = r.instances == 100 && r.max_deviation < 1e-10 && secs < 5.0;
    outcome(1, ok, format!("HMM vs path enumeration, 100 instances, max dev {:.2e} (< 1e-10), {secs:.3} s (< 5 s)", r.max_deviation))
}

fn c2() -> Outcome {
    let start = Instant::now();
    let r = kalman_suite(50, 2024).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let ok = r.instances == 50 && r.max_deviation < 1e-8 && secs < 5.0;
    outcome(2, ok, format!("RTS smoother vs dense conditioning, 50 instances, max dev {:.2e} (< 1e-8), {secs:.3} s (< 5 s)", r.max_deviation))
}

fn c3() -> Outcome {
    let grid = gaussian_estep_suite(50, 2024).unwrap();
    let mut laplace_dev: f64 = 0.0;
    for rep in 0..10 {
        let mut s = GaussianMhmmSpec::new(10, 30, 3, 2, 1.0);
        s.seed = 31;
        let ds = gen_gaussian_mhmm(&s, rep).unwrap();
        let params = init_gaussian(&ds.data, 3).unwrap();
        for seq in &ds.data {
            let post: StatePosterior = e_step_local(&params, seq, &DVector::zeros(2)).unwrap();
            let cf = update_q_closed_form(&params, seq, &post).unwrap();
            let la = update_q_laplace(&params, seq, &post, &DVector::from_element(2, 0.5)).unwrap();
            laplace_dev = laplace_dev.max((&cf.nu - &la.nu).amax()).max((&cf.omega - &la.omega).amax());
        }
    }
    let ok = grid.max_deviation < 1e-6 && laplace_dev < 1e-12;
    outcome(
        3,
        ok,
        format!("closed form vs dense grid max dev {:.2e} (< 1e-6); Laplace vs closed form {laplace_dev:.2e} (< 1e-12)", grid.max_deviation),
    )
}

fn c4() -> Outcome {
    let gauss: Vec<f64> = par::map_range(Parallelism::Rayon, 20, |rep| {
        let mut s = GaussianMhmmSpec::new(40, 60, 3, 1, 1.0);
        s.seed = 404;
        let ds = gen_gaussian_mhmm(&s, rep as u64).unwrap();
        let cfg = AvemConfig { parallelism: Parallelism::Sequential, ..Default::default() };
        let fit = fit_mhmm(&ds.data, &init_gaussian(&ds.data, 3).unwrap(), &cfg).unwrap();
        worst_drop(&fit.normalized_trace())
    });
    let messm: Vec<f64> = par::map_range(Parallelism::Rayon, 20, |rep| {
        let mut s = MessmSpec::new(25, 50);
        s.seed = 405;
        let ds = gen_messm(&s, rep as u64).unwrap();
        let cfg = MessmConfig { parallelism: Parallelism::Sequential, ..Default::default() };
        let fit = fit_messm(&ds.data, &init_messm(&ds.data, 2, &cfg).unwrap(), &cfg).unwrap();
        worst_drop(&fit.normalized_trace())
    });
    let g = gauss.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let m = messm.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    outcome(4, g <= 1e-3 && m <= 1e-3, format!("largest normalized ELBO drop from iteration 3: MHMM {g:.2e}, MESSM {m:.2e} (<= 1e-3)"))
}

fn c5() -> Outcome {
    let mut grid = Vec::new();
    for n in [20, 60, 100] {
        for tau2 in [0.25, 1.0, 2.0] {
            grid.push(ScenarioSpec::GaussianMhmm(GaussianMhmmSpec::new(n, 40, 3, 1, tau2)));
        }
    }
    let rows = run_monte_carlo(&grid, &[MethodSpec::Avem { e_step_method: None }], 20, 505, &settings()).unwrap();
    let rmse: Vec<f64> = (0..3).map(|i| cell_median(&rows, 3 * i + 1, "avem", |r| r.rmse_mu)).collect();
    let decreasing = rmse.windows(2).all(|w| w[1] < w[0]);
    let mut mse_ok = true;
    let mut pairs = Vec::new();
    for i in 0..3 {
        let lo = cell_median(&rows, 3 * i, "avem", |r| r.mse_f);
        let hi = cell_median(&rows, 3 * i + 2, "avem", |r| r.mse_f);
        mse_ok &= hi > lo;
        pairs.push(format!("{:.3}>{:.3}", hi, lo));
    }
    outcome(
        5,
        decreasing && mse_ok,
        format!("median RMSE(mu) at n=20,60,100: {:.4}, {:.4}, {:.4}; MSE(f) tau2=2 vs 0.25: {}", rmse[0], rmse[1], rmse[2], pairs.join(", ")),
    )
}

fn c6() -> Outcome {
    let mut s = GaussianMhmmSpec::new(60, 60, 3, 2, 1.0);
    s.seed = 606;
    let ds = gen_gaussian_mhmm(&s, 0).unwrap();
    let init = init_gaussian(&ds.data, 3).unwrap();
    let cfg = AvemConfig { parallelism: Parallelism::Sequential, ..Default::default() };
    let start = Instant::now();
    let fit = fit_mhmm(&ds.data, &init, &cfg).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let avem_passes = fit.passes_per_iter.iter().all(|&p| p == 60);
    let qcfg = ExactEmConfig { max_iter: 3, parallelism: Parallelism::Sequential, ..Default::default() };
    let q = fit_qem(&ds.data, &init, 3, &qcfg).unwrap();
    let qem_passes = q.passes_per_iter.iter().all(|&p| p == 60 * 9);
    outcome(
        6,
        secs <= 5.0 && avem_passes && qem_passes,
        format!(
            "AVEM n=60 T=60 K=3 d=2 single-thread {secs:.3} s ({} iterations, <= 5 s); passes/iter AVEM {:?} (= 60), QEM(J=3) {:?} (= 540)",
            fit.n_iter,
            fit.passes_per_iter.iter().collect::<std::collections::BTreeSet<_>>(),
            q.passes_per_iter.iter().collect::<std::collections::BTreeSet<_>>()
        ),
    )
}

fn c7() -> Outcome {
    let grid = vec![
        ScenarioSpec::GaussianMhmm(GaussianMhmmSpec::new(40, 40, 2, 1, 0.25)),
        ScenarioSpec::GaussianMhmm(GaussianMhmmSpec::new(40, 40, 2, 1, 1.0)),
    ];
    let methods = [MethodSpec::Avem { e_step_method: None }, MethodSpec::Qem { j: 9 }, MethodSpec::Qem { j: 3 }];
    let rows = run_monte_carlo(&grid, &methods, 20, 707, &settings()).unwrap();
    let a0 = cell_median(&rows, 0, "avem", |r| r.rmse_mu);
    let q9 = cell_median(&rows, 0, "qem(J=9)", |r| r.rmse_mu);
    let a1 = cell_median(&rows, 1, "avem", |r| r.rmse_mu);
    let q3 = cell_median(&rows, 1, "qem(J=3)", |r| r.rmse_mu);
    let ratio = a0 / q9;
    outcome(
        7,
        (0.5..=1.5).contains(&ratio) && a1 <= q3,
        format!("tau2=0.25: AVEM/QEM(J=9) median RMSE(mu) {a0:.4}/{q9:.4} = {ratio:.3} (in [0.5, 1.5]); tau2=1: AVEM {a1:.4} <= QEM(J=3) {q3:.4}"),
    )
}

fn c8() -> Outcome {
    let mut s = GaussianMhmmSpec::new(20, 40, 3, 2, 1.0);
    s.seed = 808;
    let ds = gen_gaussian_mhmm(&s, 0).unwrap();
    let params = init_gaussian(&ds.data, 3).unwrap();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for seq in &ds.data {
        let post = e_step_local(&params, seq, &DVector::zeros(2)).unwrap();
        let single = update_q_closed_form(&params, seq, &post).unwrap();
        let doubled_seq = avem::data::Sequence::new(2, [seq.values(), seq.values()].concat()).unwrap();
        let t = seq.len();
        let zeta = DMatrix::from_fn(2 * t, 3, |r, k| post.zeta[(r % t, k)]);
        let doubled_post = StatePosterior { zeta, xi: vec![], log_marginal: 0.0 };
        let double = update_q_closed_form(&params, &doubled_seq, &doubled_post).unwrap();
        let ratio = single.omega.trace() / double.omega.trace();
        lo = lo.min(ratio);
        hi = hi.max(ratio);
    }
    outcome(8, lo >= 1.6 && hi <= 2.4, format!("tr(Omega_T)/tr(Omega_2T) over 20 subjects in [{lo:.3}, {hi:.3}] (within [1.6, 2.4])"))
}

fn c9() -> Outcome {
    let grid = vec![ScenarioSpec::BernoulliMhmm(BernoulliMhmmSpec::new(40, 200, 0.25))];
    let methods = [MethodSpec::Avem { e_step_method: None }, MethodSpec::Qem { j: 20 }];
    let rows = run_monte_carlo(&grid, &methods, 20, 909, &settings()).unwrap();
    let avem_rows: Vec<_> = rows.iter().filter(|r| r.method == "avem").collect();
    let ordered = avem_rows.iter().filter(|r| r.result.beta_order_ok == Some(true)).count();
    let share = ordered as f64 / avem_rows.len() as f64;
    let a = cell_median(&rows, 0, "avem", |r| r.rmse_beta);
    let q = cell_median(&rows, 0, "qem(J=20)", |r| r.rmse_beta);
    outcome(
        9,
        share >= 0.95 && a <= 2.0 * q,
        format!("beta sign/order recovered in {ordered}/{} (>= 95%); median RMSE(beta) AVEM {a:.4} <= 2 x QEM(J=20) {q:.4}", avem_rows.len()),
    )
}

fn c10() -> Outcome {
    let spec = LocalizedSpec::new(40, 40, 10);
    let grid = vec![ScenarioSpec::Localized(spec.clone())];
    let methods = [MethodSpec::Pavem { j: 9 }, MethodSpec::Avem { e_step_method: None }];
    let rows = run_monte_carlo(&grid, &methods, 20, 1010, &settings()).unwrap();
    let p = cell_median(&rows, 0, "pavem(J=9)", |r| r.mse_fb);
    let a = cell_median(&rows, 0, "avem", |r| r.mse_fb);
    let bitwise = par::map_range(Parallelism::Rayon, 20, |rep| {
        let mut s = spec.clone();
        s.seed = cell_seed(1010, 0);
        let ds = gen_localized(&s, rep as u64).unwrap();
        let init = init_pavem(&ds.data, 2, 10).unwrap();
        let cfg = AvemConfig { e_step_method: Some(EStepMethod::ClosedForm), ..Default::default() };
        let pf = fit_pavem(&ds.data, &init, 1, &cfg).unwrap();
        let af = fit_mhmm(&ds.data, &init.base, &cfg).unwrap();
        pf.params.base == af.params
            && pf.elbo_trace == af.elbo_trace
            && pf.q_factors.iter().zip(&af.q_factors).all(|(x, y)| &x.q_a == y)
    });
    let same = bitwise.iter().filter(|b| **b).count();
    outcome(
        10,
        p <= a && same == 20,
        format!("median MSE(f_b) PAVEM(J=9) {p:.4} <= fully anchored AVEM {a:.4}; PAVEM(J=1) bitwise equal to AVEM in {same}/20"),
    )
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

fn c11() -> Outcome {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("c.toml");
    fs::write(
        &cfg,
        "schema_version = 1\nmaster_seed = 11\n[scenario]\nvariant = \"gaussian_mhmm\"\nn = 10\nt = 25\ntau2 = 1.0\n\
         [[methods]]\nmethod = \"avem\"\n[[methods]]\nmethod = \"qem\"\nj = 3\n[[methods]]\nmethod = \"mcem\"\nm = 20\n\
         [experiment]\nn_reps = 3\n[experiment.grid]\nn = [8, 12]\n",
    )
    .unwrap();
    let run = |out: &Path| -> Vec<u8> {
        let bin = env!("CARGO_BIN_EXE_avem");
        let c = cfg.to_str().unwrap();
        let o = out.to_str().unwrap();
        let data = out.join("dataset.csv");
        let mut stdout = Vec::new();
        for args in [
            vec!["simulate", "--config", c, "--out", o],
            vec!["fit", "--config", c, "--data", data.to_str().unwrap(), "--out", o],
            vec!["experiment", "--config", c, "--out", o],
            vec!["validate", "all"],
        ] {
            let r = Command::new(bin).args(&args).output().unwrap();
            assert!(r.status.success(), "{args:?}: {}", String::from_utf8_lossy(&r.stderr));
            stdout.extend(r.stdout);
        }
        stdout
    };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let (oa, ob) = (run(&a), run(&b));
    let (sa, sb) = (snapshot(&a), snapshot(&b));
    let same = sa == sb && oa == ob;
    outcome(11, same, format!("two runs of simulate, fit, experiment and validate: {} files, byte-identical: {same}", sa.len()))
}

#[test]
fn acceptance_criteria() {
    let results = [c1(), c2(), c3(), c4(), c5(), c6(), c7(), c8(), c9(), c10(), c11()];
    let failed: Vec<String> = results.iter().filter(|o| !o.passed).map(|o| format!("{}: {}", o.id, o.detail)).collect();
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.join("\n"));
}

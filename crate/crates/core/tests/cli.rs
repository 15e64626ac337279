use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use avem::cli::io::{read_dataset, write_dataset, Provenance};
use avem::data::Sequence;
use proptest::prelude::*;
use serde_json::Value;
use tempfile::TempDir;

const GAUSSIAN: &str = r#"
schema_version = 1
master_seed = 42

[scenario]
variant = "gaussian_mhmm"
n = 12
t = 30
tau2 = 1.0

[[methods]]
method = "avem"

[[methods]]
method = "qem"
j = 3
"#;

fn avem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avem")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Sorted (file name, contents) pairs of a directory.
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

fn simulate_and_fit(cfg: &Path, out: &Path, threads: &str) {
    let o = avem(&["simulate", "--config", s(cfg), "--out", s(out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let data = out.join("dataset.csv");
    let o = avem(&["fit", "--config", s(cfg), "--data", s(&data), "--out", s(out), "--threads", threads]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

fn error_json(o: &Output) -> Value {
    let text = String::from_utf8_lossy(&o.stderr);
    serde_json::from_str(text.lines().last().unwrap_or("")).unwrap_or_else(|_| panic!("stderr is not JSON: {text}"))
}

#[test]
fn simulate_then_fit_is_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", GAUSSIAN);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    simulate_and_fit(&cfg, &a, "0");
    simulate_and_fit(&cfg, &b, "0");
    let sa = snapshot(&a);
    let names: Vec<&str> = sa.iter().map(|(n, _)| n.as_str()).collect();
    for f in ["dataset.csv", "fit-avem.json", "fit-qem-j3.json", "trace-avem.csv", "trace-qem-j3.csv"] {
        assert!(names.contains(&f), "{names:?}");
    }
    assert_eq!(sa, snapshot(&b));
}

#[test]
fn thread_count_does_not_change_outputs() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", GAUSSIAN);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    simulate_and_fit(&cfg, &a, "1");
    simulate_and_fit(&cfg, &b, "4");
    assert_eq!(snapshot(&a), snapshot(&b));
}

#[test]
fn seed_flag_changes_the_data() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", GAUSSIAN);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(avem(&["simulate", "--config", s(&cfg), "--out", s(&a)]).status.success());
    assert!(avem(&["simulate", "--config", s(&cfg), "--out", s(&b), "--seed", "43"]).status.success());
    let da = fs::read_to_string(a.join("dataset.csv")).unwrap();
    let db = fs::read_to_string(b.join("dataset.csv")).unwrap();
    assert!(db.starts_with("# config_hash=") && db.lines().next().unwrap().ends_with("master_seed=43"));
    assert_ne!(da.lines().nth(2), db.lines().nth(2));
}

#[test]
fn every_output_carries_hash_and_seed() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", GAUSSIAN);
    let out = tmp.path().join("o");
    simulate_and_fit(&cfg, &out, "0");
    let files = snapshot(&out);
    assert!(files.len() >= 7, "{:?}", files.iter().map(|f| &f.0).collect::<Vec<_>>());
    let mut hash = None;
    for (name, bytes) in files {
        let text = String::from_utf8(bytes).unwrap();
        let (h, seed) = if name.ends_with(".json") {
            let v: Value = serde_json::from_str(&text).unwrap();
            (v["config_hash"].as_str().unwrap().to_string(), v["master_seed"].as_u64().unwrap())
        } else {
            let first = text.lines().next().unwrap();
            let rest = first.strip_prefix("# config_hash=").unwrap_or_else(|| panic!("{name}: {first}"));
            let (h, seed) = rest.split_once(" master_seed=").unwrap();
            (h.to_string(), seed.parse().unwrap())
        };
        assert_eq!(seed, 42, "{name}");
        assert_eq!(h.len(), 64, "{name}");
        assert_eq!(hash.get_or_insert(h.clone()), &h, "{name}");
    }
}

#[test]
fn experiment_row_count_is_cells_times_reps_times_methods() {
    let tmp = TempDir::new().unwrap();
    let text = format!("{GAUSSIAN}\n[experiment]\nn_reps = 20\n[experiment.grid]\nn = [20, 60]\nt = [20, 80]\ntau2 = [1.0]\n");
    let cfg = write_config(tmp.path(), "e.toml", &text);
    let out = tmp.path().join("e");
    let o = avem(&["experiment", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let body = fs::read_to_string(out.join("results.csv")).unwrap();
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(body.as_bytes());
    let header = rdr.headers().unwrap().clone();
    let method_col = header.iter().position(|h| h == "method").unwrap();
    let error_col = header.iter().position(|h| h == "error").unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2 * 2 * 20 * 2);
    assert_eq!(rows.iter().filter(|r| &r[method_col] == "avem").count(), 80);
    assert!(rows.iter().all(|r| r[error_col].is_empty()));
    assert!(!header.iter().any(|h| h.contains("wall_time")));
}

#[test]
fn validate_hmm_suite_reports_small_deviation() {
    let o = avem(&["validate", "oracle-hmm"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<Value> = stdout.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(!lines.is_empty());
    for v in lines {
        assert_eq!(v["passed"], true);
        assert!(v["max_deviation"].as_f64().unwrap() < 1e-10, "{v}");
    }
}

#[test]
fn config_errors_exit_with_code_2() {
    let tmp = TempDir::new().unwrap();
    let bad = write_config(tmp.path(), "bad.toml", &format!("{GAUSSIAN}\nbogus = 1\n"));
    let o = avem(&["simulate", "--config", s(&bad), "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
    let e = error_json(&o);
    assert_eq!(e["exit_code"], 2);
    assert!(e["message"].as_str().unwrap().contains("bogus"));

    let cfg = write_config(tmp.path(), "c.toml", GAUSSIAN);
    let o = avem(&["simulate", "--config", s(&cfg), "--method", "nope"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_json(&o)["exit_code"], 2);

    let o = avem(&["validate", "oracle-nothing"]);
    assert_eq!(o.status.code(), Some(2));

    let o = avem(&["simulate", "--bogus-flag"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_json(&o)["exit_code"], 2);
}

#[test]
fn io_errors_exit_with_code_4() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("missing.toml");
    let o = avem(&["simulate", "--config", s(&missing)]);
    assert_eq!(o.status.code(), Some(4));
    assert_eq!(error_json(&o)["exit_code"], 4);

    let cfg = write_config(tmp.path(), "c.toml", GAUSSIAN);
    let data = tmp.path().join("no-data.csv");
    let o = avem(&["fit", "--config", s(&cfg), "--data", s(&data), "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(4));

    let garbled = write_config(tmp.path(), "g.csv", "subject_id,t,d1\n0,0,1.0\n0,2,1.0\n");
    let o = avem(&["fit", "--config", s(&cfg), "--data", s(&garbled), "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(4));
    assert!(error_json(&o)["message"].as_str().unwrap().contains("expected t = 1"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn dataset_round_trip_is_exact(
        lens in prop::collection::vec(1usize..6, 1..5),
        p in 1usize..4,
        seed in any::<u64>(),
    ) {
        let mut state = seed;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            f64::from_bits((state >> 2) | 0x3000_0000_0000_0000) * if state & 1 == 0 { 1.0 } else { -1.0 }
        };
        let data: Vec<Sequence> = lens
            .iter()
            .map(|&t| Sequence::new(p, (0..t * p).map(|_| next()).collect()).unwrap())
            .collect();
        let tmp = TempDir::new().unwrap();
        let path = tmp.path().join("d.csv");
        let prov = Provenance { config_hash: "0".repeat(64), master_seed: seed };
        write_dataset(&path, &prov, &data).unwrap();
        let (ids, back) = read_dataset(&path).unwrap();
        prop_assert_eq!(ids.len(), data.len());
        for (a, b) in data.iter().zip(&back) {
            prop_assert_eq!(a.len(), b.len());
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}

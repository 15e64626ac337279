use avem::oracle::run_suite;

#[test]
fn all_oracle_suites_pass() {
    for r in run_suite("all", 20240917).unwrap() {
        println!("{} instances={} max_dev={:e} tol={:e}", r.name, r.instances, r.max_deviation, r.tolerance);
        assert!(r.passed(), "{r:?}");
    }
}

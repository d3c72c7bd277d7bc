//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use emotcav::config::RunConfig;
use emotcav::validate::{self, CheckResult};

fn with_limit(mut r: CheckResult, seconds: f64) -> CheckResult {
    if r.seconds >= seconds {
        r.passed = false;
        r.detail = format!("{} (over the {seconds:.0}s limit)", r.detail);
    }
    r
}

fn main() {
    let seed = 0;
    let work = tempfile::tempdir().expect("temporary directory");
    let config = RunConfig::default();

    let mut results = vec![
        with_limit(validate::gradient_integrity(seed, 20, false), 60.0),
        validate::probe_sanity(seed),
        with_limit(validate::planted_tcav(seed), 120.0),
        validate::brute_force_equivalence(seed),
        validate::statistics_oracle(seed, 200),
    ];
    let (det, report) = validate::determinism(
        &config,
        &work.path().join("a"),
        &work.path().join("b"),
        600.0,
    );
    results.push(match &report {
        Some(r) => validate::protocol_fidelity(r),
        None => CheckResult {
            name: "protocol fidelity".into(),
            passed: false,
            detail: "no report was produced".into(),
            seconds: 0.0,
        },
    });
    results.push(det);
    results.push(validate::format_roundtrips(seed));

    for (i, r) in results.iter().enumerate() {
        println!("criterion {}: {}", i + 1, r.line());
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!(
        "{} of {} criteria passed",
        results.len() - failed,
        results.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

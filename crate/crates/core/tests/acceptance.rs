//! Acceptance gate: every criterion must pass.

use pmsg_control::verify::run_all;

#[test]
fn all_acceptance_criteria_pass() {
    let report = run_all();
    for c in &report.checks {
        println!("[{}] {:>2} {}: {} ({:.2} s)", if c.passed { "PASS" } else { "FAIL" }, c.id, c.name, c.detail, c.elapsed);
    }
    println!("total {:.1} s", report.elapsed);
    let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
    assert!(report.elapsed < 300.0);
    assert_eq!(report.checks.len(), 11);
}

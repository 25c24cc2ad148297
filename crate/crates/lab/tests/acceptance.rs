//! The nine acceptance criteria at full scale and fixed seeds.
//!
//! Lines go straight to the stderr handle, which the test harness does not
//! capture, so the table shows up in ordinary `cargo test` output.

use std::io::Write;

use fbsde_lab::acceptance::run_acceptance;

fn say(line: &str) {
    let mut e = std::io::stderr().lock();
    let _ = writeln!(e, "{line}");
}

#[test]
fn acceptance_criteria() {
    let results = run_acceptance(|r| say(&r.details()));
    say("");
    for r in &results {
        say(&r.line());
    }
    let passed = results.iter().filter(|r| r.passed()).count();
    say(&format!("{passed}/{} criteria passed", results.len()));
    assert_eq!(results.len(), 9);
    let failing: Vec<usize> = results.iter().filter(|r| !r.passed()).map(|r| r.number).collect();
    assert!(failing.is_empty(), "failing criteria: {failing:?}");
}

//! Runs every acceptance criterion and prints one PASS/FAIL line per criterion.

use std::io::Write;

use nhdiff::checks::{run_all, CHECKS, DEFAULT_SEED};

#[test]
fn acceptance_criteria() {
    let results = run_all(DEFAULT_SEED);
    assert_eq!(results.len(), CHECKS.len());
    let failed: Vec<&str> = results.iter().filter(|r| !r.pass).map(|r| r.name).collect();
    let mut text = String::from("\n");
    for r in &results {
        text += &format!("{}\n", r.line());
    }
    text += &format!("{} of {} criteria pass\n", results.len() - failed.len(), results.len());
    std::io::stdout().lock().write_all(text.as_bytes()).unwrap();
    assert!(failed.is_empty(), "failed: {failed:?}");
}

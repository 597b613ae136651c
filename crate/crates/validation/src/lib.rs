//! Reporting for the acceptance run. Criteria live in `tests/acceptance.rs`.

use std::time::Instant;

pub struct Outcome {
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

/// Runs one criterion and prints a single PASS/FAIL line. Errors count as
/// failures.
pub fn run<F: FnOnce() -> Result<Outcome, String>>(id: u32, name: &str, f: F) -> bool {
    let t = Instant::now();
    let out = f().unwrap_or_else(|e| Outcome::new(false, format!("error: {e}")));
    let tag = if out.passed { "PASS" } else { "FAIL" };
    println!(
        "criterion {id:>2} [{tag}] {name}: {} ({:.1}s)",
        out.detail,
        t.elapsed().as_secs_f64()
    );
    out.passed
}

//! The invariant, gradient and determinism suites shared with the core tests.

#[allow(dead_code, clippy::all)]
#[path = "../../core/tests/common/mod.rs"]
mod suite;

use std::time::Instant;

pub use suite::Check;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Group {
    Invariants,
    Gradients,
    Determinism,
}

pub fn checks(group: Group) -> Vec<(&'static str, fn() -> Check)> {
    match group {
        Group::Invariants => suite::invariant_suite(),
        Group::Gradients => suite::gradient_suite(),
        Group::Determinism => suite::determinism_suite(),
    }
}

/// Runs the selected groups, printing one line per check; returns the failures.
pub fn run(groups: &[Group]) -> Vec<String> {
    let mut failures = Vec::new();
    for &g in groups {
        for (name, check) in checks(g) {
            let started = Instant::now();
            let secs = || started.elapsed().as_secs_f64();
            match check() {
                Ok(detail) => println!("PASS {name} ({:.1}s): {detail}", secs()),
                Err(e) => {
                    println!("FAIL {name} ({:.1}s): {e}", secs());
                    failures.push(format!("{name}: {e}"));
                }
            }
        }
    }
    failures
}

//! The twelve acceptance criteria at their stated tolerances. Prints one
//! PASS/FAIL line per criterion and exits nonzero if any fails.

use std::process::ExitCode;

use fsmp_core::acceptance::{run, SuiteConfig, CRITERIA};

fn main() -> ExitCode {
    let report = run(SuiteConfig::default());
    print!("{}", report.render());
    if report.passed() && report.results.len() == CRITERIA {
        ExitCode::SUCCESS
    } else {
        let failed: Vec<_> = report.results.iter().filter(|r| !r.passed).map(|r| r.id).collect();
        eprintln!("failed criteria: {failed:?}");
        ExitCode::FAILURE
    }
}

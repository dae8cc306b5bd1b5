//! One line per acceptance criterion; exits nonzero if any fails.

use std::process::ExitCode;

use vqp_bench::check;

fn main() -> ExitCode {
    // `cargo test -- --list` and filters: there is exactly one "test" here
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let results = check::run_all();
    for c in &results {
        println!("{c}");
    }
    let failed = results.iter().filter(|c| !c.pass).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

//! Runs every acceptance check at full scale and prints one line per check.
//! `HOLDOUT_SUITE=fast` switches to the reduced scale.

use std::process::ExitCode;

use holdout_verify::{Faults, Suite, CHECKS};

fn main() -> ExitCode {
    let suite = match std::env::var("HOLDOUT_SUITE").as_deref() {
        Ok("fast") => Suite::Fast,
        _ => Suite::Full,
    };
    println!("acceptance suite ({suite:?})");
    let mut failed = 0;
    for check in CHECKS {
        let outcome = check(suite, Faults::default());
        println!("{outcome}");
        failed += usize::from(!outcome.passed);
    }
    println!("{} passed, {failed} failed", CHECKS.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p clamp-core --test acceptance`.

use std::process::ExitCode;
use std::time::Instant;

use clamp_core::checks::acceptance_checks;

fn main() -> ExitCode {
    let checks = acceptance_checks();
    let mut failed = 0;
    for check in &checks {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check.run)
            .unwrap_or_else(|_| Err("panicked".to_string()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(()) => println!("PASS {} ({secs:.2}s)", check.name),
            Err(why) => {
                failed += 1;
                println!("FAIL {} ({secs:.2}s): {why}", check.name);
            }
        }
    }
    println!("{} passed, {failed} failed", checks.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

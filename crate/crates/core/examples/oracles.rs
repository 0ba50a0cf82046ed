//! Vectorized kernels against straight-loop reference implementations.
//!
//! `cargo run --release --example oracles [seed] [cases]`

use a2fpn::verify::oracles::{run_oracles, DEFAULT_CASES};

fn main() -> a2fpn::Result<()> {
    let mut args = std::env::args()
        .skip(1)
        .map(|a| a.parse::<u64>().expect("integer argument"));
    let seed = args.next().unwrap_or(0);
    let cases = args.next().map_or(DEFAULT_CASES, |c| c as usize);
    let reports = run_oracles(seed, cases)?;
    for r in &reports {
        println!(
            "{:<18} {:<4} max_err={:.2e} over {} shapes",
            r.op,
            if r.passed { "ok" } else { "FAIL" },
            r.max_err,
            r.cases
        );
    }
    if reports.iter().any(|r| !r.passed) {
        std::process::exit(1);
    }
    Ok(())
}

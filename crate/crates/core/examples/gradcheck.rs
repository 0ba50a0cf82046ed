//! Finite-difference check of every hand-written backward pass.
//!
//! `cargo run --release --example gradcheck [op ...]`

use a2fpn::verify::{check_gradients, registered_ops, GradCheckOptions};

fn main() -> a2fpn::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let ops: Vec<&str> = if args.is_empty() {
        registered_ops()
    } else {
        args.iter().map(String::as_str).collect()
    };
    let opts = GradCheckOptions::default();
    let mut failed = 0;
    for op in ops {
        let r = check_gradients(op, &opts)?;
        failed += usize::from(!r.passed);
        println!(
            "{:<22} {:<4} max_rel_err={:.2e} tol={:.0e} coords={} nonsmooth={} worst={} {:.0}ms",
            r.op,
            if r.passed { "ok" } else { "FAIL" },
            r.max_rel_err,
            r.tol,
            r.coords_checked,
            r.coords_nonsmooth,
            r.worst.as_deref().unwrap_or("-"),
            r.wall_ms
        );
    }
    if failed > 0 {
        eprintln!("{failed} op(s) failed");
        std::process::exit(1);
    }
    Ok(())
}

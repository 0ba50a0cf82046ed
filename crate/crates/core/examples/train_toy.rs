//! Trains the toy segmentation net on synthetic shapes and prints the loss
//! curve.
//!
//! `cargo run --release --example train_toy [arch] [steps] [lr]`

use a2fpn::pyramid::train::{threads_from_env, train_toy, with_threads};
use a2fpn::pyramid::{Arch, PyramidConfig};

fn main() -> a2fpn::Result<()> {
    let mut args = std::env::args().skip(1);
    let arch: Arch = args.next().as_deref().unwrap_or("a2fpn").parse()?;
    let cfg = PyramidConfig::toy(arch);
    let steps = args.next().map_or(Ok(cfg.train.steps), |s| s.parse()).expect("steps");
    let lr = args.next().map_or(Ok(cfg.train.lr), |s| s.parse()).expect("lr");
    let started = std::time::Instant::now();
    let (report, _) = with_threads(threads_from_env()?, || train_toy(&cfg, steps, lr))??;
    for r in report.history.iter().filter(|r| r.step % 50 == 0 || r.step == steps) {
        println!("step {:>4}  loss {:.5}  reg {:.2e}", r.step, r.loss, r.reg_loss);
    }
    println!(
        "{}: {:.4} -> {:.4} (ratio {:.3}, {}) in {:.1}s",
        report.arch,
        report.initial_loss,
        report.final_loss,
        report.ratio,
        if report.converged { "converged" } else { "not converged" },
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

//! Parameter and FLOP audit of every neck at 1280×832 on a ResNet-50
//! backbone, with the A²-FPN growth over PAFPN itemized.
//!
//! `cargo run --release --example complexity`

use a2fpn::analysis::{complexity, diff_report, reference_delta, summary_table};
use a2fpn::pyramid::{Arch, BackboneSpec, PyramidConfig};

fn main() -> a2fpn::Result<()> {
    let reports = [Arch::Fpn, Arch::Pafpn, Arch::A2fpn, Arch::A2fpnLite]
        .into_iter()
        .map(|arch| {
            complexity(&PyramidConfig {
                backbone: BackboneSpec::resnet(),
                image_size: (832, 1280),
                ..PyramidConfig::preset(arch)
            })
        })
        .collect::<a2fpn::Result<Vec<_>>>()?;
    print!("{}", summary_table(&reports));
    println!();
    print!("{}", diff_report(&reports[1], &reports[0])?.table());
    println!();
    let r = reference_delta(&reports[2], &reports[1])?;
    println!(
        "a2fpn − pafpn: {:+.2}M params ({:.2}× reference), {:+.2}G FLOPs ({:.2}× reference)",
        r.params_delta as f64 / 1e6,
        r.params_ratio,
        r.flops_delta as f64 / 1e9,
        r.flops_ratio
    );
    for l in r.itemized.iter().take(12) {
        println!("  {:<20} {:>12} {:>16}", l.name, l.params, l.flops);
    }
    Ok(())
}

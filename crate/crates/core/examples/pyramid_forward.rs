//! Builds each neck over the toy backbone and prints the pyramid it emits
//! for one image.
//!
//! `cargo run --release --example pyramid_forward [HxW]`

use a2fpn::pyramid::{describe_topology, Arch, PyramidConfig, PyramidModel};
use a2fpn::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> a2fpn::Result<()> {
    let (h, w) = std::env::args()
        .nth(1)
        .map(|s| a2fpn::cli::parse_extent(&s).map_err(a2fpn::Error::Config))
        .transpose()?
        .unwrap_or((256, 256));
    let image = Tensor::<f32>::randn(&[3, h, w], 1.0, &mut ChaCha8Rng::seed_from_u64(0));
    for arch in Arch::ALL {
        let cfg = PyramidConfig {
            image_size: (h, w),
            ..PyramidConfig::preset(arch)
        };
        let model = PyramidModel::<f32>::init(&cfg)?;
        let start = std::time::Instant::now();
        let levels = model.forward(&image)?;
        println!("{arch} ({:.0} ms)", start.elapsed().as_secs_f64() * 1e3);
        for l in &levels {
            let mean = l.map.sum() / l.map.len() as f64;
            println!(
                "  P{}  stride {:>2}  {:?}  mean {mean:+.4}",
                l.level,
                l.stride,
                l.map.shape()
            );
        }
    }
    println!();
    for line in describe_topology(&PyramidConfig::preset(Arch::A2fpn)) {
        println!("{line}");
    }
    Ok(())
}

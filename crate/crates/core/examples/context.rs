//! Multi-level global context on its own: collect a handful of context
//! features per level, reason over them jointly and redistribute them to
//! every location.
//!
//! `cargo run --release --example context`

use a2fpn::level::LevelFeature;
use a2fpn::mgc::{collect_context, mgc_forward, orthogonal_reg_loss, MgcParams};
use a2fpn::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> a2fpn::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let channels = [8, 16, 32, 64, 64];
    let sizes = [32, 16, 8, 4, 2];
    let levels: Vec<LevelFeature<f64>> = channels
        .iter()
        .zip(sizes)
        .enumerate()
        .map(|(i, (&c, s))| LevelFeature::new(2 + i, Tensor::randn(&[c, s, s], 1.0, &mut rng)))
        .collect();
    let contexts = [8, 6, 4, 2];
    let params = MgcParams::init(16, 2, &channels, &contexts, 1e-4, &mut rng)?;
    println!("orthogonality penalty at init: {:e}", orthogonal_reg_loss(&params));
    for (l, p) in levels.iter().zip(&params.collectors) {
        let g = collect_context(l, p)?;
        println!("P{} {:?} -> context bank {:?}", l.level, l.map.shape(), g.shape());
    }
    for out in mgc_forward(&levels, &params)? {
        println!("P{} enriched {:?}", out.level, out.map.shape());
    }
    Ok(())
}

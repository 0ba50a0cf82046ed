//! Saves a model's parameters as a manifest directory of tensor files,
//! reloads them into a fresh model and checks that the outputs agree.
//!
//! `cargo run --release --example checkpoint [dir]`

use a2fpn::io::{load_params, read_manifest, save_params};
use a2fpn::pyramid::{Arch, PyramidConfig, PyramidModel};
use a2fpn::{ParamSet, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> a2fpn::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("a2fpn-checkpoint"), Into::into);
    let cfg = PyramidConfig::toy(Arch::A2fpnLite);
    let model = PyramidModel::<f32>::init(&cfg)?;
    let manifest = save_params(&dir, &model)?;
    let bytes: u64 = read_manifest(&dir)?
        .tensors
        .iter()
        .map(|e| std::fs::metadata(dir.join(&e.file)).map(|m| m.len()).unwrap_or(0))
        .sum();
    println!(
        "{} tensors, {} parameters, {bytes} bytes in {}",
        manifest.tensors.len(),
        model.num_elements(),
        dir.display()
    );

    let mut restored = PyramidModel::<f32>::init(&PyramidConfig {
        seed: 99,
        ..cfg.clone()
    })?;
    load_params(&dir, &mut restored)?;
    let image = Tensor::<f32>::randn(&[3, 64, 64], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    let (a, b) = (model.forward(&image)?, restored.forward(&image)?);
    let identical = a.iter().zip(&b).all(|(x, y)| x.map == y.map);
    println!("outputs after reload identical: {identical}");
    for e in manifest.tensors.iter().take(6) {
        println!("  {:<40} {:?}", e.name, e.shape);
    }
    Ok(())
}

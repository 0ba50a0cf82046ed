//! Fusion ablations on one pair of levels: the plain content-aware
//! baselines, guided kernels and the two gate activations, plus the
//! parameter cost of each switch on the full neck.
//!
//! `cargo run --release --example ablation`

use a2fpn::analysis::count_params;
use a2fpn::fusion::{carafe_baseline, channel_gates, fuse_topdown, FusionParams, FusionSpec, GateAct};
use a2fpn::level::LevelFeature;
use a2fpn::nn::max_pool2d;
use a2fpn::pyramid::{Arch, PyramidConfig};
use a2fpn::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> a2fpn::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let c = 16;
    let upper = LevelFeature::new(4, Tensor::<f64>::randn(&[c, 8, 8], 1.0, &mut rng));
    let lateral = LevelFeature::new(3, Tensor::<f64>::randn(&[c, 16, 16], 1.0, &mut rng));
    let base = FusionSpec {
        channels: c,
        kernel_size: 5,
        encoder_kernel: 3,
        compressed: 8,
        gate_act: GateAct::TwoSigmoid,
        guided: false,
        gated: false,
        smooth: true,
    };
    let plain = FusionParams::init_up(&base, &mut ChaCha8Rng::seed_from_u64(1))?;
    let reference = carafe_baseline(&upper, &lateral, &plain)?;
    println!(
        "carafe baseline vs unguided ungated top-down fusion: max diff {:e}",
        reference.map.max_abs_diff(&fuse_topdown(&upper, &lateral, &plain)?.map)
    );
    let pooled = max_pool2d(&lateral.map)?.0;
    for (name, spec) in [
        ("guided", FusionSpec { guided: true, ..base }),
        ("gated 2σ", FusionSpec { gated: true, ..base }),
        (
            "gated σ",
            FusionSpec {
                gated: true,
                gate_act: GateAct::Sigmoid,
                ..base
            },
        ),
        (
            "guided + gated 2σ",
            FusionSpec {
                guided: true,
                gated: true,
                ..base
            },
        ),
    ] {
        let p = FusionParams::init_up(&spec, &mut ChaCha8Rng::seed_from_u64(1))?;
        let out = fuse_topdown(&upper, &lateral, &p)?;
        let g = channel_gates(&upper.map, &pooled, &p)?;
        let (lo, hi) = g
            .high
            .data()
            .iter()
            .chain(g.low.data())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        println!(
            "{name:<18} gates in [{lo:.3}, {hi:.3}], output energy {:.1}",
            out.map.dot(&out.map)?
        );
    }
    println!();
    let full = PyramidConfig::preset(Arch::A2fpn);
    for (name, cfg) in [
        ("a2fpn", full.clone()),
        (
            "no concat guidance",
            PyramidConfig {
                use_concat_guidance: false,
                ..full.clone()
            },
        ),
        (
            "no channel gates",
            PyramidConfig {
                use_channel_gates: false,
                ..full.clone()
            },
        ),
        (
            "collect from P2 only",
            PyramidConfig {
                collect_levels: vec![2],
                ..full.clone()
            },
        ),
    ] {
        println!("{name:<22} {:>10} params", count_params(&cfg)?);
    }
    Ok(())
}

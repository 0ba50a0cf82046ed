use a2fpn::fusion::{cap_baseline, carafe_baseline, fuse_bottomup, fuse_topdown, FusionParams, FusionSpec, GateAct};
use a2fpn::level::LevelFeature;
use a2fpn::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn plain_spec(c: usize, k: usize, smooth: bool) -> FusionSpec {
    FusionSpec {
        channels: c,
        kernel_size: k,
        encoder_kernel: 3,
        compressed: 4,
        gate_act: GateAct::TwoSigmoid,
        guided: false,
        gated: false,
        smooth,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn carafe_is_unguided_ungated_topdown(
        c in prop::sample::select(vec![2usize, 4, 8]),
        k in prop::sample::select(vec![1usize, 3, 5]),
        h in 1usize..5,
        w in 1usize..5,
        smooth in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut p = FusionParams::<f64>::init_up(&plain_spec(c, k, smooth), &mut r).unwrap();
        p.kernels.predictor.weight = Tensor::randn(p.kernels.predictor.weight.shape(), 1.0, &mut r);
        let upper = LevelFeature::new(5, Tensor::randn(&[c, h, w], 1.0, &mut r));
        let lateral = LevelFeature::new(4, Tensor::randn(&[c, 2 * h, 2 * w], 1.0, &mut r));
        prop_assert!(p.attention.is_none());
        prop_assert_eq!(carafe_baseline(&upper, &lateral, &p).unwrap(), fuse_topdown(&upper, &lateral, &p).unwrap());
    }

    #[test]
    fn cap_is_unguided_ungated_bottomup(
        c in prop::sample::select(vec![2usize, 4, 8]),
        k in prop::sample::select(vec![1usize, 3, 5]),
        h in 1usize..5,
        w in 1usize..5,
        smooth in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut p = FusionParams::<f64>::init_down(&plain_spec(c, k, smooth), &mut r).unwrap();
        p.kernels.predictor.weight = Tensor::randn(p.kernels.predictor.weight.shape(), 1.0, &mut r);
        let lower = LevelFeature::new(3, Tensor::randn(&[c, 2 * h, 2 * w], 1.0, &mut r));
        let td = LevelFeature::new(4, Tensor::randn(&[c, h, w], 1.0, &mut r));
        prop_assert_eq!(cap_baseline(&lower, &td, &p).unwrap(), fuse_bottomup(&lower, &td, &p).unwrap());
    }
}

#[test]
fn baselines_reject_guided_predictors() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let spec = FusionSpec {
        guided: true,
        ..plain_spec(4, 3, true)
    };
    let up = FusionParams::<f64>::init_up(&spec, &mut r).unwrap();
    let upper = LevelFeature::new(5, Tensor::zeros(&[4, 2, 2]));
    let lateral = LevelFeature::new(4, Tensor::zeros(&[4, 4, 4]));
    assert!(carafe_baseline(&upper, &lateral, &up).is_err());
    let down = FusionParams::<f64>::init_down(&spec, &mut r).unwrap();
    assert!(cap_baseline(&lateral, &upper, &down).is_err());
}

use a2fpn::fusion::{
    fuse_bottomup, fuse_topdown, predict_down_kernels, predict_up_kernels, reassemble_down, reassemble_up,
    FusionParams, FusionSpec, GateAct, ReassemblyKernels,
};
use a2fpn::io::{encode_tensor, read_tensor, StoredTensor};
use a2fpn::level::LevelFeature;
use a2fpn::mgc::{compatibility, orthogonal_reg_loss, MgcParams};
use a2fpn::nn::{conv2d, max_pool2d};
use a2fpn::tensor::softmax;
use a2fpn::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn spec(c: usize, k: usize) -> FusionSpec {
    FusionSpec {
        channels: c,
        kernel_size: k,
        encoder_kernel: 3,
        compressed: 4,
        gate_act: GateAct::TwoSigmoid,
        guided: true,
        gated: true,
        smooth: true,
    }
}

/// Makes the predictor output far from uniform.
fn sharpen<T: a2fpn::Scalar>(p: &mut FusionParams<T>, r: &mut ChaCha8Rng) {
    p.kernels.predictor.weight = Tensor::randn(p.kernels.predictor.weight.shape(), 1.0, r);
}

fn column_sums(t: &Tensor<f32>) -> Vec<f64> {
    let (rows, cols) = (t.shape()[0], t.len() / t.shape()[0]);
    (0..cols)
        .map(|j| (0..rows).map(|i| t.data()[i * cols + j] as f64).sum())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_columns_sum_to_one(nq in 1usize..7, d in 1usize..9, nk in 1usize..12, seed in any::<u64>(), spread in 0.1f64..20.0) {
        let mut r = rng(seed);
        let q = Tensor::<f32>::randn(&[nq, d], spread, &mut r);
        let k = Tensor::<f32>::randn(&[d, nk], 1.0, &mut r);
        let map = compatibility(&q, &k, d).unwrap().values;
        prop_assert_eq!(map.shape(), &[nk, nq][..]);
        for s in column_sums(&map) {
            prop_assert!((s - 1.0).abs() < 1e-6, "column sums to {}", s);
        }
    }

    #[test]
    fn reassembly_kernels_sum_to_one(k in prop::sample::select(vec![1usize, 3, 5]), h in 1usize..5, w in 1usize..5, seed in any::<u64>(), guided in any::<bool>()) {
        let mut r = rng(seed);
        let s = FusionSpec { guided, ..spec(4, k) };
        let mut up = FusionParams::<f32>::init_up(&s, &mut r).unwrap();
        let mut down = FusionParams::<f32>::init_down(&s, &mut r).unwrap();
        sharpen(&mut up, &mut r);
        sharpen(&mut down, &mut r);
        let coarse = Tensor::<f32>::randn(&[4, h, w], 1.0, &mut r);
        let fine = Tensor::<f32>::randn(&[4, 2 * h, 2 * w], 1.0, &mut r);
        let (pooled, _) = max_pool2d(&fine).unwrap();
        let ku = predict_up_kernels(&coarse, &pooled, &up).unwrap().values;
        prop_assert_eq!(ku.shape(), &[k * k, 2 * h, 2 * w][..]);
        let kd = predict_down_kernels(&fine, &a2fpn::nn::nearest_upsample(&coarse, 2).unwrap(), &down).unwrap().values;
        prop_assert_eq!(kd.shape(), &[k * k, h, w][..]);
        for s in column_sums(&ku).into_iter().chain(column_sums(&kd)) {
            prop_assert!((s - 1.0).abs() < 1e-6, "kernel sums to {}", s);
        }
    }

    #[test]
    fn compatibility_ignores_positive_key_scale(nq in 1usize..6, d in 1usize..8, nk in 1usize..8, seed in any::<u64>()) {
        let mut r = rng(seed);
        let q = Tensor::<f64>::randn(&[nq, d], 1.0, &mut r);
        let k = Tensor::<f64>::randn(&[d, nk], 1.0, &mut r);
        let scales = Tensor::<f64>::rand_uniform(&[nk], 0.01, 100.0, &mut r);
        let mut scaled = k.clone();
        for (i, v) in scaled.data_mut().iter_mut().enumerate() {
            *v *= scales.data()[i % nk];
        }
        let a = compatibility(&q, &k, d).unwrap().values;
        let b = compatibility(&q, &scaled, d).unwrap().values;
        prop_assert!(a.max_abs_diff(&b) <= 1e-12, "diff {}", a.max_abs_diff(&b));
    }

    #[test]
    fn constant_map_reassembles_to_constant_inside(k in prop::sample::select(vec![1usize, 3, 5]), h in 1usize..7, w in 1usize..7, value in -5.0f64..5.0, seed in any::<u64>()) {
        let mut r = rng(seed);
        let r_k = k / 2;
        let c = 2;
        let src = Tensor::full(&[c, h, w], value);
        let up = ReassemblyKernels { values: softmax(&Tensor::randn(&[k * k, 2 * h, 2 * w], 2.0, &mut r), 0).unwrap() };
        let out = reassemble_up(&src, &up).unwrap();
        let inside = |centre: usize, n: usize| centre >= r_k && centre + r_k < n;
        for ch in 0..c {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    if inside(y / 2, h) && inside(x / 2, w) {
                        prop_assert!((out.at3(ch, y, x) - value).abs() <= 1e-12);
                    }
                }
            }
        }
        let fine = Tensor::full(&[c, 2 * h, 2 * w], value);
        let down = ReassemblyKernels { values: softmax(&Tensor::randn(&[k * k, h, w], 2.0, &mut r), 0).unwrap() };
        let out = reassemble_down(&fine, &down).unwrap();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    if inside(2 * y, 2 * h) && inside(2 * x, 2 * w) {
                        prop_assert!((out.at3(ch, y, x) - value).abs() <= 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn neutral_two_sigmoid_gates_are_plain_addition(h in 1usize..4, w in 1usize..4, seed in any::<u64>()) {
        let mut r = rng(seed);
        let c = 8;
        let mut up = FusionParams::<f64>::init_up(&spec(c, 5), &mut r).unwrap();
        let mut down = FusionParams::<f64>::init_down(&spec(c, 5), &mut r).unwrap();
        for p in [&mut up, &mut down] {
            // zero squeeze: every pre-activation is exactly 0 and 2σ(0) = 1
            p.attention.as_mut().unwrap().squeeze.weight.fill(0.0);
        }
        let coarse = LevelFeature::new(4, Tensor::randn(&[c, h, w], 1.0, &mut r));
        let fine = LevelFeature::new(3, Tensor::randn(&[c, 2 * h, 2 * w], 1.0, &mut r));

        let (pooled, _) = max_pool2d(&fine.map).unwrap();
        let ku = predict_up_kernels(&coarse.map, &pooled, &up).unwrap();
        let plain = reassemble_up(&coarse.map, &ku).unwrap().add(&fine.map).unwrap();
        let want = conv2d(up.smooth.as_ref().unwrap(), &plain).unwrap();
        prop_assert_eq!(fuse_topdown(&coarse, &fine, &up).unwrap().map, want);

        let td = LevelFeature::new(4, coarse.map.clone());
        let kd = predict_down_kernels(&fine.map, &a2fpn::nn::bilinear_upsample(&td.map, 2).unwrap(), &down).unwrap();
        let plain = td.map.add(&reassemble_down(&fine.map, &kd).unwrap()).unwrap();
        let want = conv2d(down.smooth.as_ref().unwrap(), &plain).unwrap();
        prop_assert_eq!(fuse_bottomup(&fine, &td, &down).unwrap().map, want);
    }

    #[test]
    fn orthogonal_loss_vanishes_at_init(ci in prop::collection::vec(1usize..10, 1..5), seed in any::<u64>()) {
        let mut r = rng(seed);
        let contexts: Vec<usize> = ci.iter().map(|&c| 1 + (seed as usize) % c).collect();
        let p = MgcParams::<f64>::init(8, 2, &ci, &contexts, 1.0, &mut r).unwrap();
        prop_assert!(orthogonal_reg_loss(&p) < 1e-24, "loss {}", orthogonal_reg_loss(&p));
    }

    #[test]
    fn tensor_files_round_trip(shape in prop::collection::vec(0usize..5, 0..4), seed in any::<u64>()) {
        let mut r = rng(seed);
        let t = Tensor::<f64>::randn(&shape, 3.0, &mut r);
        prop_assert_eq!(read_tensor(encode_tensor(&t).unwrap().as_slice()).unwrap(), StoredTensor::F64(t.clone()));
        let f: Tensor<f32> = t.cast();
        prop_assert_eq!(read_tensor(encode_tensor(&f).unwrap().as_slice()).unwrap(), StoredTensor::F32(f));
    }
}

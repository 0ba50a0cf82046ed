//! One PASS/FAIL line per acceptance criterion. Run with `--nocapture` to
//! see them.

use std::time::Instant;

use a2fpn::analysis::{complexity, count_flops, count_params, reference_delta};
use a2fpn::fusion::{
    cap_baseline, carafe_baseline, fuse_bottomup, fuse_topdown, predict_down_kernels, predict_up_kernels,
    reassemble_down, reassemble_up, FusionParams, FusionSpec, GateAct, ReassemblyKernels,
};
use a2fpn::level::LevelFeature;
use a2fpn::mgc::{compatibility, orthogonal_reg_loss, MgcParams};
use a2fpn::nn::{bilinear_upsample, conv2d, max_pool2d};
use a2fpn::pyramid::train::{train_toy_with, with_threads, TrainReport, CONVERGENCE_RATIO};
use a2fpn::pyramid::{Arch, BackboneSpec, PyramidConfig, PyramidModel};
use a2fpn::tensor::softmax;
use a2fpn::verify::{run_oracles, run_suite, GradCheckOptions};
use a2fpn::{ParamSet, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let reports = with_threads(Some(1), || run_suite(&GradCheckOptions::default()))
        .unwrap()
        .unwrap();
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.op.as_str()).collect();
    let worst = reports.iter().map(|r| r.max_rel_err / r.tol).fold(0.0f64, f64::max);
    verdict(
        failed.is_empty() && secs < 60.0,
        format!(
            "{} ops, failures {:?}, worst err/tol {:.2}, {:.1}s single-threaded (limit 60s)",
            reports.len(),
            failed,
            worst,
            secs
        ),
    )
}

fn oracle_equivalence() -> Verdict {
    let reports = run_oracles(0, 50).unwrap();
    let max = reports.iter().map(|r| r.max_err).fold(0.0f64, f64::max);
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.op.as_str()).collect();
    verdict(
        failed.is_empty() && reports.iter().all(|r| r.cases >= 50),
        format!(
            "{} oracles × 50 shapes, max err {max:.1e} (tol 1e-12), failures {failed:?}",
            reports.len()
        ),
    )
}

fn fusion_spec(c: usize, k: usize, guided: bool, gated: bool) -> FusionSpec {
    FusionSpec {
        channels: c,
        kernel_size: k,
        encoder_kernel: 3,
        compressed: 4,
        gate_act: GateAct::TwoSigmoid,
        guided,
        gated,
        smooth: true,
    }
}

fn column_error(t: &Tensor<f32>) -> f64 {
    let (rows, cols) = (t.shape()[0], t.len() / t.shape()[0]);
    (0..cols)
        .map(|j| ((0..rows).map(|i| t.data()[i * cols + j] as f64).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

fn invariant_suite() -> Verdict {
    let mut r = ChaCha8Rng::seed_from_u64(7);
    let (mut col_err, mut kernel_err, mut scale_err, mut const_err) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut gates_exact = true;
    let mut ortho = 0.0f64;
    for trial in 0..40 {
        let (nq, d, nk) = (1 + trial % 5, 1 + trial % 7, 1 + trial % 9);
        let q = Tensor::<f32>::randn(&[nq, d], 3.0, &mut r);
        let k = Tensor::<f32>::randn(&[d, nk], 1.0, &mut r);
        col_err = col_err.max(column_error(&compatibility(&q, &k, d).unwrap().values));

        let (h, w, ks) = (1 + trial % 4, 1 + trial % 3, [1, 3, 5][trial % 3]);
        let mut up = FusionParams::<f32>::init_up(&fusion_spec(4, ks, true, true), &mut r).unwrap();
        let mut down = FusionParams::<f32>::init_down(&fusion_spec(4, ks, true, true), &mut r).unwrap();
        up.kernels.predictor.weight = Tensor::randn(up.kernels.predictor.weight.shape(), 1.0, &mut r);
        down.kernels.predictor.weight = Tensor::randn(down.kernels.predictor.weight.shape(), 1.0, &mut r);
        let coarse = Tensor::<f32>::randn(&[4, h, w], 1.0, &mut r);
        let fine = Tensor::<f32>::randn(&[4, 2 * h, 2 * w], 1.0, &mut r);
        let ku = predict_up_kernels(&coarse, &max_pool2d(&fine).unwrap().0, &up).unwrap();
        let kd = predict_down_kernels(&fine, &bilinear_upsample(&coarse, 2).unwrap(), &down).unwrap();
        kernel_err = kernel_err.max(column_error(&ku.values)).max(column_error(&kd.values));

        let q = Tensor::<f64>::randn(&[nq, d], 1.0, &mut r);
        let k = Tensor::<f64>::randn(&[d, nk], 1.0, &mut r);
        let s = Tensor::<f64>::rand_uniform(&[nk], 0.01, 100.0, &mut r);
        let mut scaled = k.clone();
        scaled
            .data_mut()
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v *= s.data()[i % nk]);
        let a = compatibility(&q, &k, d).unwrap().values;
        scale_err = scale_err.max(a.max_abs_diff(&compatibility(&q, &scaled, d).unwrap().values));

        let (h, w) = (3 + trial % 4, 3 + trial % 5);
        let value = (trial as f64) - 20.0;
        let kk = ks * ks;
        let rk = ks / 2;
        let kernels = ReassemblyKernels {
            values: softmax(&Tensor::randn(&[kk, 2 * h, 2 * w], 2.0, &mut r), 0).unwrap(),
        };
        let out = reassemble_up(&Tensor::full(&[2, h, w], value), &kernels).unwrap();
        let inside = |c: usize, n: usize| c >= rk && c + rk < n;
        for y in 0..2 * h {
            for x in 0..2 * w {
                if inside(y / 2, h) && inside(x / 2, w) {
                    const_err = const_err.max((out.at3(1, y, x) - value).abs());
                }
            }
        }
        let kernels = ReassemblyKernels {
            values: softmax(&Tensor::randn(&[kk, h, w], 2.0, &mut r), 0).unwrap(),
        };
        let out = reassemble_down(&Tensor::full(&[2, 2 * h, 2 * w], value), &kernels).unwrap();
        for y in 0..h {
            for x in 0..w {
                if inside(2 * y, 2 * h) && inside(2 * x, 2 * w) {
                    const_err = const_err.max((out.at3(0, y, x) - value).abs());
                }
            }
        }

        let mut up = FusionParams::<f64>::init_up(&fusion_spec(8, 5, true, true), &mut r).unwrap();
        let mut down = FusionParams::<f64>::init_down(&fusion_spec(8, 5, true, true), &mut r).unwrap();
        up.attention.as_mut().unwrap().squeeze.weight.fill(0.0);
        down.attention.as_mut().unwrap().squeeze.weight.fill(0.0);
        let hi = LevelFeature::new(4, Tensor::randn(&[8, 2, 3], 1.0, &mut r));
        let lo = LevelFeature::new(3, Tensor::randn(&[8, 4, 6], 1.0, &mut r));
        let ku = predict_up_kernels(&hi.map, &max_pool2d(&lo.map).unwrap().0, &up).unwrap();
        let plain = reassemble_up(&hi.map, &ku).unwrap().add(&lo.map).unwrap();
        gates_exact &= fuse_topdown(&hi, &lo, &up).unwrap().map == conv2d(up.smooth.as_ref().unwrap(), &plain).unwrap();
        let kd = predict_down_kernels(&lo.map, &bilinear_upsample(&hi.map, 2).unwrap(), &down).unwrap();
        let plain = hi.map.add(&reassemble_down(&lo.map, &kd).unwrap()).unwrap();
        gates_exact &=
            fuse_bottomup(&lo, &hi, &down).unwrap().map == conv2d(down.smooth.as_ref().unwrap(), &plain).unwrap();

        let widths = [4 + trial % 6, 8, 16, 32];
        let contexts = [1 + trial % 4, 3, 2, 1];
        let p = MgcParams::<f64>::init(8, 2, &widths, &contexts, 1.0, &mut r).unwrap();
        ortho = ortho.max(orthogonal_reg_loss(&p));
    }
    let passed =
        col_err < 1e-6 && kernel_err < 1e-6 && scale_err <= 1e-12 && const_err <= 1e-12 && gates_exact && ortho < 1e-24;
    verdict(
        passed,
        format!(
            "attention cols {col_err:.1e}, kernels {kernel_err:.1e} (f32, tol 1e-6); key rescale {scale_err:.1e}, constant interior {const_err:.1e} (tol 1e-12); neutral 2σ gates bit-exact {gates_exact}; orthogonal loss at init {ortho:.1e}"
        ),
    )
}

fn complexity_deltas() -> Verdict {
    let cfg = |arch| PyramidConfig {
        backbone: BackboneSpec::resnet(),
        image_size: (832, 1280),
        ..PyramidConfig::preset(arch)
    };
    let dp = count_params(&cfg(Arch::Pafpn)).unwrap() - count_params(&cfg(Arch::Fpn)).unwrap();
    let df = count_flops(&cfg(Arch::Pafpn)).unwrap() - count_flops(&cfg(Arch::Fpn)).unwrap();
    let rel = (df as f64 - 25.77e9).abs() / 25.77e9;
    let r = reference_delta(
        &complexity(&cfg(Arch::A2fpn)).unwrap(),
        &complexity(&cfg(Arch::Pafpn)).unwrap(),
    )
    .unwrap();
    let top: Vec<String> = r
        .itemized
        .iter()
        .take(3)
        .map(|l| format!("{} {:.1}G", l.name, l.flops as f64 / 1e9))
        .collect();
    verdict(
        dp == 3_540_480 && rel < 1e-3,
        format!(
            "pafpn−fpn {dp} params, {:.3}G FLOPs ({:.3}% off 25.77G); informational a2fpn−pafpn {:+.2}M ({:.2}×) {:+.2}G ({:.2}×), {} ±20%, largest: {}",
            df as f64 / 1e9,
            rel * 100.0,
            r.params_delta as f64 / 1e6,
            r.params_ratio,
            r.flops_delta as f64 / 1e9,
            r.flops_ratio,
            if r.within_tolerance { "within" } else { "outside" },
            top.join(", ")
        ),
    )
}

fn shape_contract() -> Verdict {
    let mut ok = true;
    let mut seen = Vec::new();
    for (arch, c) in [(Arch::A2fpn, 256), (Arch::A2fpnLite, 128)] {
        let cfg = PyramidConfig::preset(arch);
        let model = PyramidModel::<f32>::init(&cfg).unwrap();
        let image = Tensor::randn(&[3, 256, 256], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let levels = model.forward(&image).unwrap();
        let strides: Vec<usize> = levels.iter().map(|l| l.stride).collect();
        ok &= strides == [4, 8, 16, 32, 64]
            && levels
                .iter()
                .all(|l| l.map.shape() == [c, 256 / l.stride, 256 / l.stride]);
        seen.push(format!(
            "{arch}: strides {strides:?} width {}",
            levels[0].map.shape()[0]
        ));
    }
    verdict(ok, seen.join("; "))
}

fn train(cfg: &PyramidConfig, threads: Option<usize>) -> (TrainReport, Vec<Vec<f32>>) {
    with_threads(threads, || {
        let (report, net) = train_toy_with::<f32>(cfg, cfg.train.steps, cfg.train.lr).unwrap();
        (
            report,
            net.named().into_iter().map(|(_, t)| t.data().to_vec()).collect(),
        )
    })
    .unwrap()
}

fn toy_training() -> Verdict {
    let start = Instant::now();
    let mut ok = true;
    let mut notes = Vec::new();
    for arch in [Arch::A2fpn, Arch::A2fpnLite] {
        let cfg = PyramidConfig::toy(arch);
        assert_eq!((cfg.train.steps, cfg.train.images, cfg.seed), (500, 8, 0));
        let (a, pa) = train(&cfg, None);
        let (b, pb) = train(&cfg, Some(2));
        let same = a == b && pa == pb;
        ok &= a.ratio < CONVERGENCE_RATIO && same;
        notes.push(format!(
            "{arch} {:.3}→{:.4} (ratio {:.4}), rerun at 2 threads identical {same}",
            a.initial_loss, a.final_loss, a.ratio
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    notes.push(format!("{secs:.0}s for four 500-step runs"));
    verdict(ok, notes.join("; "))
}

fn ablation_plumbing() -> Verdict {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let mut exact = true;
    for trial in 0..30 {
        let (c, k, h, w) = ([2, 4, 8][trial % 3], [1, 3, 5][trial % 3], 1 + trial % 4, 1 + trial % 3);
        let mut up = FusionParams::<f64>::init_up(&fusion_spec(c, k, false, false), &mut r).unwrap();
        let mut down = FusionParams::<f64>::init_down(&fusion_spec(c, k, false, false), &mut r).unwrap();
        up.kernels.predictor.weight = Tensor::randn(up.kernels.predictor.weight.shape(), 1.0, &mut r);
        down.kernels.predictor.weight = Tensor::randn(down.kernels.predictor.weight.shape(), 1.0, &mut r);
        let coarse = LevelFeature::new(4, Tensor::randn(&[c, h, w], 1.0, &mut r));
        let fine = LevelFeature::new(3, Tensor::randn(&[c, 2 * h, 2 * w], 1.0, &mut r));
        exact &= carafe_baseline(&coarse, &fine, &up).unwrap() == fuse_topdown(&coarse, &fine, &up).unwrap();
        exact &= cap_baseline(&fine, &coarse, &down).unwrap() == fuse_bottomup(&fine, &coarse, &down).unwrap();
    }
    let mut notes = vec![format!("carafe/cap bit-exact {exact}")];
    let mut stable = true;
    for act in [GateAct::Sigmoid, GateAct::TwoSigmoid] {
        let cfg = PyramidConfig {
            gate_act: act,
            ..PyramidConfig::toy(Arch::A2fpn)
        };
        let cfg = PyramidConfig {
            train: a2fpn::pyramid::TrainConfig {
                steps: 200,
                ..cfg.train.clone()
            },
            ..cfg
        };
        let (report, _) = train(&cfg, None);
        let finite = report.history.iter().all(|h| h.loss.is_finite());
        stable &= finite && report.final_loss < report.initial_loss;
        notes.push(format!(
            "{act:?} 200 steps {:.3}→{:.4}",
            report.initial_loss, report.final_loss
        ));
    }
    verdict(exact && stable, notes.join("; "))
}

#[test]
fn acceptance() {
    type Criterion = (&'static str, fn() -> Verdict);
    let criteria: [Criterion; 7] = [
        ("gradient suite", gradient_suite),
        ("oracle equivalence", oracle_equivalence),
        ("invariant suite", invariant_suite),
        ("complexity deltas", complexity_deltas),
        ("shape/stride contract", shape_contract),
        ("toy training", toy_training),
        ("ablation plumbing", ablation_plumbing),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let v = check();
        println!(
            "criterion {} {} {}: {}",
            i + 1,
            if v.passed { "PASS" } else { "FAIL" },
            name,
            v.detail
        );
        if !v.passed {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria {failed:?}");
}

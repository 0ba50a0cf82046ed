use a2fpn::fusion::GateAct;
use a2fpn::pyramid::train::{train_toy_with, with_threads};
use a2fpn::pyramid::{Arch, PyramidConfig};
use a2fpn::ParamSet;

fn short_run(cfg: &PyramidConfig, steps: usize, threads: Option<usize>) -> (Vec<f64>, Vec<Vec<f32>>) {
    with_threads(threads, || {
        let (report, net) = train_toy_with::<f32>(cfg, steps, cfg.train.lr).unwrap();
        let losses = report.history.iter().map(|r| r.loss).collect();
        let params = net.named().into_iter().map(|(_, t)| t.data().to_vec()).collect();
        (losses, params)
    })
    .unwrap()
}

#[test]
fn identical_across_pool_sizes_and_repeats() {
    let cfg = PyramidConfig::toy(Arch::A2fpnLite);
    let one = short_run(&cfg, 8, Some(1));
    assert_eq!(one, short_run(&cfg, 8, Some(3)));
    assert_eq!(one, short_run(&cfg, 8, None));
}

#[test]
fn zero_learning_rate_does_not_move() {
    let cfg = PyramidConfig::toy(Arch::Fpn);
    let (report, _) = train_toy_with::<f32>(&cfg, 3, 0.0).unwrap();
    assert!(report.history.iter().all(|r| r.loss == report.initial_loss));
    assert!(!report.converged);
}

#[test]
fn both_gate_activations_descend() {
    for act in [GateAct::Sigmoid, GateAct::TwoSigmoid] {
        let cfg = PyramidConfig {
            gate_act: act,
            ..PyramidConfig::toy(Arch::A2fpnLite)
        };
        let (report, _) = train_toy_with::<f32>(&cfg, 40, cfg.train.lr).unwrap();
        assert!(report.history.iter().all(|r| r.loss.is_finite()), "{act:?}");
        assert!(
            report.final_loss < 0.5 * report.initial_loss,
            "{act:?}: {}",
            report.ratio
        );
    }
}

#[test]
fn baselines_train_too() {
    for arch in [Arch::Fpn, Arch::Pafpn] {
        let cfg = PyramidConfig::toy(arch);
        let (report, _) = train_toy_with::<f32>(&cfg, 40, cfg.train.lr).unwrap();
        assert!(report.final_loss < report.initial_loss, "{arch}");
    }
}

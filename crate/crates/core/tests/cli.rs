use std::fs;
use std::path::Path;
use std::process::Command;

use a2fpn::io::{load_named, read_manifest};
use serde_json::Value;

fn run(args: &[&str], out: &Path) -> (i32, String) {
    let o = Command::new(env!("CARGO_BIN_EXE_a2fpn"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs");
    (
        o.status.code().expect("exit code"),
        String::from_utf8_lossy(&o.stdout).into_owned(),
    )
}

fn report(out: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(out.join("run.json")).unwrap()).unwrap()
}

#[test]
fn gradcheck_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g");
    assert_eq!(run(&["gradcheck", "/no/such/config.toml"], &out).0, 2);
    assert_eq!(report(&out)["outcome"], "error");

    assert_eq!(run(&["gradcheck", "--tol", "0", "--op", "matmul"], &out).0, 1);
    assert_eq!(report(&out)["outcome"], "fail");

    let cfg = dir.path().join("cfg.toml");
    fs::write(&cfg, "arch = \"a2fpn\"\nprofile = \"toy\"\nseed = 3\n").unwrap();
    let (code, _) = run(
        &[
            "gradcheck",
            cfg.to_str().unwrap(),
            "--op",
            "conv2d",
            "--op",
            "fuse_topdown",
        ],
        &out,
    );
    assert_eq!(code, 0);
    let r = report(&out);
    assert_eq!(r["seed"], 3);
    assert_eq!(r["config_digest"].as_str().unwrap().len(), 64);
    let checks: Value = serde_json::from_str(&fs::read_to_string(out.join("gradcheck.json")).unwrap()).unwrap();
    assert_eq!(checks.as_array().unwrap().len(), 2);

    assert_eq!(run(&["gradcheck", "--op", "no_such_op"], &out).0, 2);
}

#[test]
fn forward_writes_five_levels_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert_eq!(run(&["forward", "--arch", "a2fpn", "--random", "256x256"], out).0, 0);
    }
    let manifest = read_manifest(&a.join("outputs")).unwrap();
    let shapes: Vec<Vec<usize>> = manifest.tensors.iter().map(|e| e.shape.clone()).collect();
    assert_eq!(shapes, [64, 32, 16, 8, 4].map(|s| vec![256, s, s]).to_vec(),);
    for e in &manifest.tensors {
        let (x, y) = (a.join("outputs").join(&e.file), b.join("outputs").join(&e.file));
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{}", e.name);
    }
    assert_eq!(load_named(&a.join("outputs")).unwrap().len(), 5);

    let lite = dir.path().join("lite");
    assert_eq!(
        run(&["forward", "--arch", "a2fpn_lite", "--random", "128x192"], &lite).0,
        0
    );
    let m = read_manifest(&lite.join("outputs")).unwrap();
    assert!(m.tensors.iter().all(|e| e.shape[0] == 128));
    assert_eq!(m.tensors[0].shape, vec![128, 32, 48]);

    let bad = dir.path().join("bad");
    assert_eq!(run(&["forward", "--arch", "a2fpn", "--random", "100x256"], &bad).0, 1);
    assert_eq!(
        run(&["forward", "--arch", "fpn", "--input", "/no/such.a2tsr"], &bad).0,
        2
    );
}

#[test]
fn forward_reads_tensor_files() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("image.a2tsr");
    let image = a2fpn::Tensor::<f32>::full(&[3, 64, 64], 0.5);
    a2fpn::io::save_tensor(&input, &image).unwrap();
    let out = dir.path().join("o");
    assert_eq!(
        run(
            &["forward", "--arch", "pafpn", "--input", input.to_str().unwrap()],
            &out
        )
        .0,
        0
    );
    assert_eq!(read_manifest(&out.join("outputs")).unwrap().tensors.len(), 5);
}

#[test]
fn count_deltas() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c");
    let (code, stdout) = run(
        &["count", "--arch", "pafpn", "--diff", "fpn", "--image-size", "1280x832"],
        &out,
    );
    assert_eq!(code, 0);
    assert!(stdout.contains("Method"));
    let counts: Value = serde_json::from_str(&fs::read_to_string(out.join("count.json")).unwrap()).unwrap();
    assert_eq!(counts["delta"]["params"], 3_540_480);
    assert_eq!(counts["reports"][0]["image_size"], serde_json::json!([832, 1280]));

    assert_eq!(run(&["count", "--arch", "fpn", "--diff", "fpn"], &out).0, 0);
    let counts: Value = serde_json::from_str(&fs::read_to_string(out.join("count.json")).unwrap()).unwrap();
    assert_eq!(counts["delta"]["params"], 0);
    assert_eq!(counts["delta"]["flops"], 0);

    assert_eq!(run(&["count", "--arch", "retinanet"], &out).0, 2);
    assert_eq!(run(&["count", "--arch", "fpn", "--image-size", "1000x832"], &out).0, 2);
}

#[test]
fn train_toy_contract() {
    let dir = tempfile::tempdir().unwrap();
    let frozen = dir.path().join("frozen");
    assert_eq!(
        run(
            &["train-toy", "--arch", "a2fpn_lite", "--steps", "3", "--lr", "0"],
            &frozen
        )
        .0,
        1
    );
    assert_eq!(report(&frozen)["outcome"], "fail");

    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        run(
            &["train-toy", "--arch", "a2fpn_lite", "--steps", "6", "--seed", "5"],
            out,
        );
    }
    let csv = fs::read_to_string(a.join("loss.csv")).unwrap();
    assert!(csv.starts_with("step,loss,reg_loss\n"));
    assert_eq!(csv.lines().count(), 8);
    assert_eq!(csv, fs::read_to_string(b.join("loss.csv")).unwrap());
    assert_eq!(report(&a)["config_digest"], report(&b)["config_digest"]);
    assert!(read_manifest(&a.join("checkpoint")).unwrap().tensors.len() > 10);
}

//! Command-line front end: argument definitions, run reports and the exit
//! code contract (0 success, 1 check or numeric failure, 2 usage or config
//! error).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::analysis::{complexity, diff_report, summary_table};
use crate::error::{Error, Result};
use crate::io::{load_tensor, save_named, save_params, MANIFEST_FILE};
use crate::pyramid::train::{threads_from_env, train_toy_with, with_threads};
use crate::pyramid::{Arch, BackboneSpec, PyramidConfig, PyramidModel};
use crate::tensor::{DType, Scalar, Tensor};
use crate::verify::gradcheck::{check_gradients, registered_ops, GradCheckOptions, DEFAULT_EPS};
use crate::verify::oracles::{run_oracles, DEFAULT_CASES};

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

pub const REPORT_FILE: &str = "run.json";

/// Offset mixed into the seed for the random input image.
const INPUT_SEED_OFFSET: u64 = 0x1a6e;

#[derive(Debug, Parser)]
#[command(name = "a2fpn", version, about = "Attention-aggregation feature pyramid toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Finite-difference check of every registered backward pass.
    Gradcheck(GradcheckArgs),
    /// Compare vectorized kernels against naive loops.
    Oracles(OraclesArgs),
    /// Run a neck on an image and write its pyramid levels.
    Forward(ForwardArgs),
    /// Parameter and FLOP audit of a neck.
    Count(CountArgs),
    /// Train the toy segmentation net on synthetic shapes.
    TrainToy(TrainArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Gradcheck(_) => "gradcheck",
            Command::Oracles(_) => "oracles",
            Command::Forward(_) => "forward",
            Command::Count(_) => "count",
            Command::TrainToy(_) => "train-toy",
        }
    }

    fn out(&self) -> &Path {
        match self {
            Command::Gradcheck(a) => &a.out,
            Command::Oracles(a) => &a.out,
            Command::Forward(a) => &a.out,
            Command::Count(a) => &a.out,
            Command::TrainToy(a) => &a.out,
        }
    }
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Model config; only its seed is used.
    pub config: Option<PathBuf>,
    /// Tolerance for every op instead of the per-kind default.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_EPS)]
    pub eps: f64,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Restrict to these ops.
    #[arg(long = "op")]
    pub ops: Vec<String>,
    #[arg(long, default_value = "runs/gradcheck")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct OraclesArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_CASES)]
    pub cases: usize,
    #[arg(long, default_value = "runs/oracles")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ForwardArgs {
    /// Preset to run when no config is given.
    #[arg(long)]
    pub arch: Option<Arch>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Image tensor file of shape 3×H×W.
    #[arg(long, conflicts_with = "random", required_unless_present = "random")]
    pub input: Option<PathBuf>,
    /// Random image of the given `HxW`.
    #[arg(long, value_parser = parse_extent)]
    pub random: Option<(usize, usize)>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "runs/forward")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CountArgs {
    #[arg(long)]
    pub arch: Option<Arch>,
    /// Config layered under the flags; selects ablation switches.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Input `WxH`.
    #[arg(long, value_parser = parse_extent, default_value = "1280x832")]
    pub image_size: (usize, usize),
    /// `resnet`, `toy` or four comma-separated stage widths.
    #[arg(long, default_value = "resnet")]
    pub backbone_spec: BackboneSpec,
    /// Also report the difference to this architecture.
    #[arg(long)]
    pub diff: Option<Arch>,
    #[arg(long, default_value = "runs/count")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Toy preset to train when no config is given.
    #[arg(long)]
    pub arch: Option<Arch>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "runs/train-toy")]
    pub out: PathBuf,
}

/// `AxB` into `(A, B)`.
pub fn parse_extent(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("'{s}' is not of the form AxB"))?;
    let num = |p: &str| p.trim().parse::<usize>().map_err(|e| format!("'{s}': {e}"));
    Ok((num(a)?, num(b)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Pass,
    Fail,
    Error,
}

impl Outcome {
    pub fn exit_code(self) -> u8 {
        match self {
            Outcome::Pass => EXIT_OK,
            Outcome::Fail => EXIT_FAILURE,
            Outcome::Error => EXIT_USAGE,
        }
    }
}

/// Machine-readable summary written to `<out>/run.json`.
#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub command: String,
    pub config_digest: Option<String>,
    pub seed: Option<u64>,
    pub outcome: Outcome,
    pub exit_code: u8,
    pub message: Option<String>,
    pub artifacts: Vec<PathBuf>,
    pub wall_ms: f64,
}

/// What a command produced before the report is assembled.
#[derive(Debug, Default)]
pub struct Run {
    pub config_digest: Option<String>,
    pub seed: Option<u64>,
    pub passed: bool,
    pub message: Option<String>,
    pub artifacts: Vec<PathBuf>,
}

/// Exit code for an error: bad input and configuration are usage errors,
/// everything numeric is a failure.
pub fn error_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Format(_) | Error::Io(_) | Error::Json(_) => EXIT_USAGE,
        Error::Dim(_) | Error::NonFinite(_) | Error::Diverged { .. } => EXIT_FAILURE,
    }
}

/// Parses the process arguments, runs the command and writes its report.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    ExitCode::from(execute(&cli.command).exit_code)
}

/// Runs `command` on the pool sized by `A2FPN_THREADS` and writes the run
/// report under its output directory.
pub fn execute(command: &Command) -> RunReport {
    let start = Instant::now();
    let result = threads_from_env()
        .and_then(|t| with_threads(t, || dispatch(command)))
        .and_then(|r| r);
    let (outcome, run) = match result {
        Ok(run) => {
            if let Some(m) = &run.message {
                eprintln!("{m}");
            }
            (if run.passed { Outcome::Pass } else { Outcome::Fail }, run)
        }
        Err(e) => {
            eprintln!("error: {e}");
            let outcome = if error_code(&e) == EXIT_USAGE {
                Outcome::Error
            } else {
                Outcome::Fail
            };
            (
                outcome,
                Run {
                    message: Some(e.to_string()),
                    ..Run::default()
                },
            )
        }
    };
    let report = RunReport {
        command: command.name().to_string(),
        config_digest: run.config_digest,
        seed: run.seed,
        outcome,
        exit_code: outcome.exit_code(),
        message: run.message,
        artifacts: run.artifacts,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    if let Err(e) = write_json(&command.out().join(REPORT_FILE), &report) {
        eprintln!("cannot write run report: {e}");
    }
    report
}

fn dispatch(command: &Command) -> Result<Run> {
    match command {
        Command::Gradcheck(a) => gradcheck(a),
        Command::Oracles(a) => oracles(a),
        Command::Forward(a) => forward(a),
        Command::Count(a) => count(a),
        Command::TrainToy(a) => train(a),
    }
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<PathBuf> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(path.to_path_buf())
}

/// Config from `path`, else `fallback(arch)`; an explicit arch must agree
/// with the file.
fn resolve_config(
    path: Option<&Path>,
    arch: Option<Arch>,
    fallback: fn(Arch) -> PyramidConfig,
) -> Result<PyramidConfig> {
    match path {
        None => Ok(fallback(arch.unwrap_or(Arch::A2fpn))),
        Some(p) => {
            let cfg = PyramidConfig::from_path(p)?;
            match arch {
                Some(a) if a != cfg.arch => Err(Error::Config(format!(
                    "--arch {a} disagrees with arch {} in {}",
                    cfg.arch,
                    p.display()
                ))),
                _ => Ok(cfg),
            }
        }
    }
}

fn gradcheck(a: &GradcheckArgs) -> Result<Run> {
    let cfg = a.config.as_deref().map(PyramidConfig::from_path).transpose()?;
    let seed = a.seed.or(cfg.as_ref().map(|c| c.seed)).unwrap_or(0);
    if a.eps.is_nan() || a.eps <= 0.0 {
        return Err(Error::Config(format!("eps = {} must be positive", a.eps)));
    }
    let opts = GradCheckOptions {
        seed,
        eps: a.eps,
        tol: a.tol,
    };
    let ops: Vec<&str> = if a.ops.is_empty() {
        registered_ops()
    } else {
        a.ops.iter().map(String::as_str).collect()
    };
    let mut reports = Vec::with_capacity(ops.len());
    for op in ops {
        let r = check_gradients(op, &opts)?;
        println!(
            "{:<22} {:<4} max_rel_err={:.2e} tol={:.0e} coords={} nonsmooth={}",
            r.op,
            if r.passed { "ok" } else { "FAIL" },
            r.max_rel_err,
            r.tol,
            r.coords_checked,
            r.coords_nonsmooth
        );
        reports.push(r);
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.op.as_str()).collect();
    Ok(Run {
        config_digest: cfg.as_ref().map(PyramidConfig::digest),
        seed: Some(seed),
        passed: failed.is_empty(),
        message: (!failed.is_empty()).then(|| format!("gradient check failed for {}", failed.join(", "))),
        artifacts: vec![write_json(&a.out.join("gradcheck.json"), &reports)?],
    })
}

fn oracles(a: &OraclesArgs) -> Result<Run> {
    if a.cases == 0 {
        return Err(Error::Config("cases must be positive".into()));
    }
    let reports = run_oracles(a.seed, a.cases)?;
    for r in &reports {
        println!(
            "{:<18} {:<4} max_err={:.2e} tol={:.0e} cases={}",
            r.op,
            if r.passed { "ok" } else { "FAIL" },
            r.max_err,
            r.tol,
            r.cases
        );
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.op.as_str()).collect();
    Ok(Run {
        seed: Some(a.seed),
        passed: failed.is_empty(),
        message: (!failed.is_empty()).then(|| format!("oracle mismatch for {}", failed.join(", "))),
        artifacts: vec![write_json(&a.out.join("oracles.json"), &reports)?],
        ..Run::default()
    })
}

fn forward(a: &ForwardArgs) -> Result<Run> {
    let mut cfg = resolve_config(a.config.as_deref(), a.arch, PyramidConfig::preset)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let image: Tensor<f64> = match (&a.input, a.random) {
        (Some(path), _) => load_tensor(path)?.cast(),
        (None, Some((h, w))) => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(INPUT_SEED_OFFSET));
            Tensor::randn(&[3, h, w], 1.0, &mut rng)
        }
        (None, None) => return Err(Error::Config("one of --input or --random is required".into())),
    };
    let shape = image.shape().to_vec();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::Dim(format!("input image must be 3×H×W, got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    if h == 0 || w == 0 || h % 64 != 0 || w % 64 != 0 {
        return Err(Error::Dim(format!(
            "image extents {h}x{w} must be positive multiples of 64 to form five levels"
        )));
    }
    cfg.image_size = (h, w);
    let dir = a.out.join("outputs");
    match cfg.dtype {
        DType::F32 => forward_with::<f32>(&cfg, &image.cast(), &dir)?,
        DType::F64 => forward_with::<f64>(&cfg, &image, &dir)?,
    }
    Ok(Run {
        config_digest: Some(cfg.digest()),
        seed: Some(cfg.seed),
        passed: true,
        message: None,
        artifacts: vec![dir.join(MANIFEST_FILE)],
    })
}

fn forward_with<T: Scalar>(cfg: &PyramidConfig, image: &Tensor<T>, dir: &Path) -> Result<()> {
    let model = PyramidModel::<T>::init(cfg)?;
    let levels = model.forward(image)?;
    for l in &levels {
        println!("P{}  stride {:>2}  {:?}", l.level, l.stride, l.map.shape());
    }
    save_named(dir, levels.iter().map(|l| (format!("p{}", l.level), &l.map)))?;
    Ok(())
}

fn count(a: &CountArgs) -> Result<Run> {
    let base = resolve_config(a.config.as_deref(), a.arch, PyramidConfig::preset)?;
    let at = |arch: Arch| -> Result<PyramidConfig> {
        let mut cfg = if arch == base.arch {
            base.clone()
        } else {
            PyramidConfig::preset(arch)
        };
        cfg.image_size = (a.image_size.1, a.image_size.0);
        cfg.backbone = a.backbone_spec.clone();
        Ok(cfg)
    };
    let cfg = at(base.arch)?;
    let report = complexity(&cfg)?;
    print!("{}", report.breakdown_table());
    println!();
    let mut reports = vec![report];
    let delta = match a.diff {
        None => None,
        Some(other) => {
            reports.push(complexity(&at(other)?)?);
            let d = diff_report(&reports[0], &reports[1])?;
            print!("{}", d.table());
            println!();
            Some(d)
        }
    };
    print!("{}", summary_table(&reports));
    #[derive(Serialize)]
    struct CountOutput<'a> {
        reports: &'a [crate::analysis::ComplexityReport],
        delta: Option<crate::analysis::DeltaReport>,
    }
    let path = write_json(
        &a.out.join("count.json"),
        &CountOutput {
            reports: &reports,
            delta,
        },
    )?;
    Ok(Run {
        config_digest: Some(cfg.digest()),
        seed: None,
        passed: true,
        message: None,
        artifacts: vec![path],
    })
}

fn train(a: &TrainArgs) -> Result<Run> {
    let mut cfg = resolve_config(a.config.as_deref(), a.arch, PyramidConfig::toy)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(steps) = a.steps {
        cfg.train.steps = steps;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr = lr;
    }
    if cfg.train.lr.is_nan() || cfg.train.lr < 0.0 {
        return Err(Error::Config(format!("lr = {} must be non-negative", cfg.train.lr)));
    }
    match cfg.dtype {
        DType::F32 => train_with::<f32>(&cfg, &a.out),
        DType::F64 => train_with::<f64>(&cfg, &a.out),
    }
}

fn train_with<T: Scalar>(cfg: &PyramidConfig, out: &Path) -> Result<Run> {
    let (report, net) = train_toy_with::<T>(cfg, cfg.train.steps, cfg.train.lr)?;
    fs::create_dir_all(out)?;
    let csv = out.join("loss.csv");
    fs::write(&csv, report.to_csv())?;
    let checkpoint = out.join("checkpoint");
    save_params(&checkpoint, &net)?;
    println!(
        "{}: loss {:.5} -> {:.5} over {} steps (ratio {:.4})",
        report.arch, report.initial_loss, report.final_loss, report.steps, report.ratio
    );
    Ok(Run {
        config_digest: Some(cfg.digest()),
        seed: Some(cfg.seed),
        passed: report.converged,
        message: (!report.converged).then(|| {
            format!(
                "final loss {:.5} is not below 10% of initial loss {:.5}",
                report.final_loss, report.initial_loss
            )
        }),
        artifacts: vec![csv, checkpoint.join(MANIFEST_FILE)],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extents_parse() {
        assert_eq!(parse_extent("1280x832"), Ok((1280, 832)));
        assert_eq!(parse_extent("64X32"), Ok((64, 32)));
        assert!(parse_extent("64").is_err());
        assert!(parse_extent("ax3").is_err());
    }

    #[test]
    fn error_classes() {
        assert_eq!(error_code(&Error::Config("x".into())), EXIT_USAGE);
        assert_eq!(error_code(&Error::Dim("x".into())), EXIT_FAILURE);
        assert_eq!(
            error_code(&Error::Diverged {
                step: 1,
                loss: f64::NAN
            }),
            EXIT_FAILURE
        );
    }

    #[test]
    fn parses_every_subcommand() {
        for args in [
            &["a2fpn", "gradcheck", "--tol", "0"][..],
            &["a2fpn", "oracles", "--cases", "3"],
            &["a2fpn", "forward", "--arch", "a2fpn_lite", "--random", "64x64"],
            &[
                "a2fpn",
                "count",
                "--arch",
                "pafpn",
                "--diff",
                "fpn",
                "--image-size",
                "1280x832",
            ],
            &["a2fpn", "train-toy", "--steps", "2", "--lr", "0"],
        ] {
            Cli::try_parse_from(args).unwrap();
        }
        assert!(Cli::try_parse_from(["a2fpn", "count", "--arch", "resnet"]).is_err());
        assert!(Cli::try_parse_from(["a2fpn", "forward", "--arch", "fpn"]).is_err());
    }
}

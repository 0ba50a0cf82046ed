//! Central finite-difference checks of every hand-written backward pass.
//!
//! Each registered op is wrapped as a [`Problem`]: a list of leaf tensors
//! (data inputs followed by parameters), a forward map to one or more
//! outputs, and the analytic vector-Jacobian product. The scalar under test
//! is a fixed random projection of the outputs.

use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{ensure_dim, Error, Result};
use crate::fusion::{
    cap_baseline, carafe_baseline, fuse_backward, fuse_bottomup_traced, fuse_topdown_traced, gates_backward,
    gates_forward, predict_backward, predict_forward, reassemble_down, reassemble_down_backward, reassemble_up,
    reassemble_up_backward, ChannelAttentionParams, Direction, FusionParams, FusionSpec, GateAct,
    KernelPredictorParams, ReassemblyKernels,
};
use crate::level::LevelFeature;
use crate::mgc::{
    collect_backward, collect_forward, concat_columns, distribute_backward, distribute_forward, gcn_backward,
    gcn_forward, mgc_backward, mgc_forward_traced, orthogonal_reg_grad, orthogonal_reg_loss, split_columns,
    CollectorParams, Compatibility, DistributorParams, GcnParams, MgcParams,
};
use crate::nn::{
    bilinear_upsample, bilinear_upsample_backward, concat_channels, conv2d, conv2d_backward, max_pool2d,
    max_pool2d_backward, nearest_upsample, nearest_upsample_backward, pixel_shuffle, pixel_unshuffle, scale_channels,
    scale_channels_backward, split_channels,
};
use crate::params::{join, orthonormal_rows, ConvParams, LinearParams, ParamSet};
use crate::pyramid::train::{synthetic_dataset, SegmentationNet};
use crate::pyramid::{
    a2fpn_backward, forward_a2fpn_traced, forward_fpn_traced, fpn_backward, make_extra_level, toy_backbone_backward,
    toy_backbone_forward_traced, A2fpnParams, Arch, BackboneParams, BackboneSpec, FpnParams, PyramidConfig,
};
use crate::tensor::{
    l2_normalize, l2_normalize_backward, layer_norm, layer_norm_backward, matmul, matmul_backward, relu, relu_backward,
    sigmoid, sigmoid_backward, softmax, softmax_backward, two_sigmoid, two_sigmoid_backward, Tensor, L2_EPS, LN_EPS,
};

use super::rel_err;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const PRIMITIVE_TOL: f64 = 1e-6;
pub const COMPOSED_TOL: f64 = 1e-4;

/// Share of sampled coordinates allowed to straddle a non-differentiable
/// point (ReLU or max-pool switch) before a check fails outright.
pub const MAX_NONSMOOTH_FRACTION: f64 = 0.1;

type T = f64;
type Forward = Box<dyn Fn(&[Tensor<T>]) -> Result<Vec<Tensor<T>>>>;
type Backward = Box<dyn Fn(&[Tensor<T>], &[Tensor<T>]) -> Result<Vec<Tensor<T>>>>;

struct Problem {
    inputs: Vec<Tensor<T>>,
    forward: Forward,
    backward: Backward,
    /// Coordinates sampled per leaf tensor; all of them when the tensor is
    /// smaller.
    coords: usize,
}

impl Problem {
    fn plain(
        inputs: Vec<Tensor<T>>,
        forward: impl Fn(&[Tensor<T>]) -> Result<Vec<Tensor<T>>> + 'static,
        backward: impl Fn(&[Tensor<T>], &[Tensor<T>]) -> Result<Vec<Tensor<T>>> + 'static,
    ) -> Self {
        Self {
            inputs,
            forward: Box::new(forward),
            backward: Box::new(backward),
            coords: 64,
        }
    }

    /// Data tensors followed by every tensor of `params`, in visit order.
    fn with_params<P: ParamSet<T> + 'static>(
        data: Vec<Tensor<T>>,
        params: P,
        forward: impl Fn(&[Tensor<T>], &P) -> Result<Vec<Tensor<T>>> + 'static,
        backward: impl Fn(&[Tensor<T>], &P, &[Tensor<T>]) -> Result<(Vec<Tensor<T>>, P)> + 'static,
    ) -> Self {
        let nd = data.len();
        let mut inputs = data;
        inputs.extend(params.to_flat());
        let (t1, t2) = (params.clone(), params);
        Self {
            inputs,
            forward: Box::new(move |xs| {
                let mut p = t1.clone();
                p.load_flat(&xs[nd..])?;
                forward(&xs[..nd], &p)
            }),
            backward: Box::new(move |xs, gs| {
                let mut p = t2.clone();
                p.load_flat(&xs[nd..])?;
                let (mut gd, gp) = backward(&xs[..nd], &p, gs)?;
                gd.extend(gp.to_flat());
                Ok(gd)
            }),
            coords: 32,
        }
    }

    fn coords(mut self, n: usize) -> Self {
        self.coords = n;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Primitive,
    Composed,
}

impl OpKind {
    pub fn tolerance(self) -> f64 {
        match self {
            OpKind::Primitive => PRIMITIVE_TOL,
            OpKind::Composed => COMPOSED_TOL,
        }
    }
}

const PRIMITIVES: &[&str] = &[
    "matmul",
    "softmax",
    "l2_normalize",
    "two_sigmoid",
    "sigmoid",
    "relu",
    "layer_norm",
    "conv2d",
    "conv2d_strided",
    "conv2d_pointwise",
    "max_pool2d",
    "bilinear_upsample",
    "nearest_upsample",
    "pixel_shuffle",
    "concat_channels",
    "scale_channels",
];

const COMPOSED: &[&str] = &[
    "compatibility",
    "collect_context",
    "orthogonal_reg_loss",
    "gcn_layer",
    "reason_multilevel",
    "distribute_context",
    "mgc_forward",
    "predict_up_kernels",
    "reassemble_up",
    "channel_gates",
    "channel_gates_sigmoid",
    "fuse_topdown",
    "predict_down_kernels",
    "reassemble_down",
    "fuse_bottomup",
    "carafe_baseline",
    "cap_baseline",
    "toy_backbone",
    "make_extra_level",
    "forward_fpn",
    "forward_pafpn",
    "forward_a2fpn",
    "forward_a2fpn_lite",
    "segmentation_loss",
];

/// Every op [`check_gradients`] knows, primitives first.
pub fn registered_ops() -> Vec<&'static str> {
    PRIMITIVES.iter().chain(COMPOSED).copied().collect()
}

pub fn op_kind(op: &str) -> Option<OpKind> {
    if PRIMITIVES.contains(&op) {
        Some(OpKind::Primitive)
    } else if COMPOSED.contains(&op) {
        Some(OpKind::Composed)
    } else {
        None
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub seed: u64,
    pub eps: f64,
    /// Overrides the per-kind tolerance.
    pub tol: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            eps: DEFAULT_EPS,
            tol: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub op: String,
    pub kind: OpKind,
    pub shapes: Vec<Vec<usize>>,
    pub eps: f64,
    pub tol: f64,
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// Coordinates whose difference quotients at ε/2, ε and 2ε disagree,
    /// either because the perturbation crosses a kink or because the
    /// quotient is below roundoff; excluded from the error.
    pub coords_nonsmooth: usize,
    /// `leaf[index]` of the worst coordinate.
    pub worst: Option<String>,
    pub passed: bool,
    /// Not serialized, so reports of equal runs compare byte for byte.
    #[serde(skip)]
    pub wall_ms: f64,
}

/// `(f(x + εe_i) − f(x − εe_i)) / 2ε` for every coordinate of `x`.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor<T>) -> Result<f64>, x: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    ensure_dim!(eps > 0.0, "finite-difference step must be positive");
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let d = central_difference(&mut |t| f(t), &mut probe, i, eps)?;
        grad.push(d);
    }
    Tensor::new(x.shape(), grad)
}

fn central_difference(
    f: &mut dyn FnMut(&Tensor<T>) -> Result<f64>,
    probe: &mut Tensor<T>,
    i: usize,
    eps: f64,
) -> Result<f64> {
    let orig = probe.data()[i];
    probe.data_mut()[i] = orig + eps;
    let up = f(probe)?;
    probe.data_mut()[i] = orig - eps;
    let down = f(probe)?;
    probe.data_mut()[i] = orig;
    if !up.is_finite() || !down.is_finite() {
        return Err(Error::NonFinite(format!("objective near coordinate {i}")));
    }
    Ok((up - down) / (2.0 * eps))
}

fn run_problem(op: &str, kind: OpKind, problem: Problem, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let start = Instant::now();
    let tol = opts.tol.unwrap_or(kind.tolerance());
    // Smoothness is judged at the kind tolerance so a tighter override
    // cannot reclassify every coordinate as a kink.
    let smooth_tol = kind.tolerance();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9);
    let outs = (problem.forward)(&problem.inputs)?;
    if let Some(bad) = outs.iter().position(|o| !o.is_finite()) {
        return Err(Error::NonFinite(format!("{op} output {bad}")));
    }
    // Unit-norm projection keeps adjoints O(1) regardless of output size.
    let total: usize = outs.iter().map(Tensor::len).sum();
    let std = 1.0 / (total.max(1) as f64).sqrt();
    let projs: Vec<Tensor<T>> = outs.iter().map(|o| Tensor::randn(o.shape(), std, &mut rng)).collect();
    let analytic = (problem.backward)(&problem.inputs, &projs)?;
    ensure_dim!(
        analytic.len() == problem.inputs.len(),
        "{op}: backward returned {} adjoints for {} leaves",
        analytic.len(),
        problem.inputs.len()
    );
    let mut max_err = 0.0f64;
    let mut worst = None;
    let mut checked = 0;
    let mut nonsmooth = 0;
    let mut leaves = problem.inputs.clone();
    for li in 0..leaves.len() {
        ensure_dim!(
            analytic[li].shape() == leaves[li].shape(),
            "{op}: adjoint {li} has shape {:?}, leaf has {:?}",
            analytic[li].shape(),
            leaves[li].shape()
        );
        if !analytic[li].is_finite() {
            return Err(Error::NonFinite(format!("{op} adjoint {li}")));
        }
        let n = leaves[li].len();
        let idx: Vec<usize> = if n <= problem.coords {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, problem.coords).into_vec();
            v.sort_unstable();
            v
        };
        for i in idx {
            let a = analytic[li].data()[i];
            let d1 = diff_leaf(&problem.forward, &projs, &mut leaves, li, i, opts.eps)?;
            let mut err = rel_err(a, d1);
            if err >= tol {
                let d2 = diff_leaf(&problem.forward, &projs, &mut leaves, li, i, opts.eps / 2.0)?;
                let d3 = diff_leaf(&problem.forward, &projs, &mut leaves, li, i, opts.eps * 2.0)?;
                let spread = rel_err(d1, d2).max(rel_err(d1, d3)).max(rel_err(d2, d3));
                if spread >= smooth_tol {
                    nonsmooth += 1;
                    continue;
                }
                err = err.min(rel_err(a, d2)).min(rel_err(a, d3));
            }
            checked += 1;
            if err > max_err || worst.is_none() {
                max_err = max_err.max(err);
                worst = Some(format!("{li}[{i}]"));
            }
        }
    }
    let total = checked + nonsmooth;
    let passed = max_err < tol && (nonsmooth as f64) <= MAX_NONSMOOTH_FRACTION * total as f64;
    Ok(GradCheckReport {
        op: op.to_string(),
        kind,
        shapes: problem.inputs.iter().map(|t| t.shape().to_vec()).collect(),
        eps: opts.eps,
        tol,
        max_rel_err: max_err,
        coords_checked: checked,
        coords_nonsmooth: nonsmooth,
        worst,
        passed,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Central difference of the projected objective. The two perturbed
/// outputs are subtracted before projecting so that outputs the coordinate
/// does not touch cancel exactly.
fn diff_leaf(
    forward: &Forward,
    projs: &[Tensor<T>],
    leaves: &mut [Tensor<T>],
    li: usize,
    i: usize,
    eps: f64,
) -> Result<f64> {
    let orig = leaves[li].data()[i];
    let (hi, lo) = (orig + eps, orig - eps);
    leaves[li].data_mut()[i] = hi;
    let up = forward(leaves);
    leaves[li].data_mut()[i] = lo;
    let down = forward(leaves);
    leaves[li].data_mut()[i] = orig;
    let (up, down) = (up?, down?);
    let mut acc = 0.0;
    for ((u, d), p) in up.iter().zip(&down).zip(projs) {
        acc += u.sub(d)?.dot(p)?;
    }
    if !acc.is_finite() {
        return Err(Error::NonFinite(format!("objective near leaf {li}[{i}]")));
    }
    // the step actually taken, after rounding of x ± ε
    Ok(acc / (hi - lo))
}

/// Checks one registered op with the default shapes for that op.
pub fn check_gradients(op: &str, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let kind = op_kind(op).ok_or_else(|| Error::Config(format!("unknown gradcheck op '{op}'")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let problem = build(op, &mut rng)?;
    run_problem(op, kind, problem, opts)
}

/// Every registered op in registry order.
pub fn run_suite(opts: &GradCheckOptions) -> Result<Vec<GradCheckReport>> {
    registered_ops()
        .into_iter()
        .map(|op| check_gradients(op, opts))
        .collect()
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::randn(shape, 1.0, rng)
}

/// Adds N(0, std²) noise to every parameter so that no tensor sits at a
/// degenerate initial value (zero biases, near-zero predictor weights).
fn jitter<P: ParamSet<T>>(mut p: P, std: f64, rng: &mut ChaCha8Rng) -> P {
    p.visit_mut("", &mut |_, t| {
        let noise = Tensor::randn(t.shape(), std, rng);
        t.add_assign(&noise).expect("same shape");
    });
    p
}

fn fusion_spec(c: usize, guided: bool, gated: bool, act: GateAct) -> FusionSpec {
    FusionSpec {
        channels: c,
        kernel_size: 5,
        encoder_kernel: 3,
        compressed: 4,
        gate_act: act,
        guided,
        gated,
        smooth: true,
    }
}

/// Bundles a distributor with the shared output projection.
#[derive(Clone)]
struct DistributeSet {
    level: DistributorParams<T>,
    output: LinearParams<T>,
}

impl ParamSet<T> for DistributeSet {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.level.query.visit(&join(prefix, "theta"), f);
        self.level.residual.visit(&join(prefix, "xi"), f);
        self.output.visit(&join(prefix, "out"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.level.query.visit_mut(&join(prefix, "theta"), f);
        self.level.residual.visit_mut(&join(prefix, "xi"), f);
        self.output.visit_mut(&join(prefix, "out"), f);
    }
}

fn tiny_a2fpn_config(arch: Arch) -> PyramidConfig {
    PyramidConfig {
        c: 8,
        a: 1,
        c_m: 4,
        backbone: BackboneSpec { channels: [4, 4, 6, 6] },
        ..PyramidConfig::toy(arch)
    }
}

fn backbone_levels(channels: &[usize; 4], base: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor<T>> {
    channels
        .iter()
        .enumerate()
        .map(|(i, &c)| randn(&[c, base >> i, base >> i], rng))
        .collect()
}

fn as_levels(xs: &[Tensor<T>], first: usize) -> Vec<LevelFeature<T>> {
    xs.iter()
        .enumerate()
        .map(|(i, t)| LevelFeature::new(first + i, t.clone()))
        .collect()
}

fn maps(levels: Vec<LevelFeature<T>>) -> Vec<Tensor<T>> {
    levels.into_iter().map(|l| l.map).collect()
}

fn build(op: &str, rng: &mut ChaCha8Rng) -> Result<Problem> {
    let p = match op {
        "matmul" => Problem::plain(
            vec![randn(&[4, 5], rng), randn(&[5, 3], rng)],
            |x| Ok(vec![matmul(&x[0], &x[1])?]),
            |x, g| {
                let (ga, gb) = matmul_backward(&x[0], &x[1], &g[0])?;
                Ok(vec![ga, gb])
            },
        ),
        "softmax" => Problem::plain(
            vec![randn(&[5], rng), randn(&[3, 4], rng), randn(&[2, 3, 4], rng)],
            |x| {
                Ok(vec![
                    softmax(&x[0], 0)?,
                    softmax(&x[1], 1)?,
                    softmax(&x[2], 0)?,
                    softmax(&x[2], 2)?,
                ])
            },
            |x, g| {
                let y = [
                    softmax(&x[0], 0)?,
                    softmax(&x[1], 1)?,
                    softmax(&x[2], 0)?,
                    softmax(&x[2], 2)?,
                ];
                let g2 = softmax_backward(&y[2], &g[2], 0)?.add(&softmax_backward(&y[3], &g[3], 2)?)?;
                Ok(vec![
                    softmax_backward(&y[0], &g[0], 0)?,
                    softmax_backward(&y[1], &g[1], 1)?,
                    g2,
                ])
            },
        ),
        "l2_normalize" => Problem::plain(
            vec![randn(&[5], rng), randn(&[3, 4], rng), randn(&[2, 3, 4], rng)],
            |x| {
                Ok(vec![
                    l2_normalize(&x[0], 0, L2_EPS)?,
                    l2_normalize(&x[1], 0, L2_EPS)?,
                    l2_normalize(&x[2], 1, L2_EPS)?,
                ])
            },
            |x, g| {
                Ok(vec![
                    l2_normalize_backward(&x[0], &g[0], 0, L2_EPS)?,
                    l2_normalize_backward(&x[1], &g[1], 0, L2_EPS)?,
                    l2_normalize_backward(&x[2], &g[2], 1, L2_EPS)?,
                ])
            },
        ),
        "two_sigmoid" => Problem::plain(
            vec![randn(&[2, 3, 4], rng)],
            |x| Ok(vec![two_sigmoid(&x[0])]),
            |x, g| Ok(vec![two_sigmoid_backward(&two_sigmoid(&x[0]), &g[0])?]),
        ),
        "sigmoid" => Problem::plain(
            vec![randn(&[2, 3, 4], rng)],
            |x| Ok(vec![sigmoid(&x[0])]),
            |x, g| Ok(vec![sigmoid_backward(&sigmoid(&x[0]), &g[0])?]),
        ),
        "relu" => Problem::plain(
            vec![randn(&[2, 3, 4], rng)],
            |x| Ok(vec![relu(&x[0])]),
            |x, g| Ok(vec![relu_backward(&x[0], &g[0])?]),
        ),
        "layer_norm" => Problem::plain(
            vec![randn(&[6], rng), randn(&[6], rng), randn(&[6], rng)],
            |x| Ok(vec![layer_norm(&x[0], &x[1], &x[2], LN_EPS)?]),
            |x, g| {
                let r = layer_norm_backward(&x[0], &x[1], &g[0], LN_EPS)?;
                Ok(vec![r.input, r.gain, r.shift])
            },
        ),
        "conv2d" | "conv2d_strided" | "conv2d_pointwise" => {
            let (shape, k, stride) = match op {
                "conv2d" => ([2, 5, 5], 3, 1),
                "conv2d_strided" => ([2, 6, 6], 3, 2),
                _ => ([3, 4, 4], 1, 1),
            };
            let params = jitter(ConvParams::kaiming(shape[0], 3, k, stride, true, rng), 0.1, rng);
            Problem::with_params(
                vec![randn(&shape, rng)],
                params,
                |x, p| Ok(vec![conv2d(p, &x[0])?]),
                |x, p, g| {
                    let (gx, gp) = conv2d_backward(p, &x[0], &g[0])?;
                    Ok((vec![gx], gp))
                },
            )
        }
        "max_pool2d" => Problem::plain(
            vec![randn(&[2, 4, 6], rng)],
            |x| Ok(vec![max_pool2d(&x[0])?.0]),
            |x, g| Ok(vec![max_pool2d_backward(&max_pool2d(&x[0])?.1, &g[0])?]),
        ),
        "bilinear_upsample" => Problem::plain(
            vec![randn(&[2, 3, 4], rng)],
            |x| Ok(vec![bilinear_upsample(&x[0], 2)?, bilinear_upsample(&x[0], 4)?]),
            |x, g| {
                let a = bilinear_upsample_backward(x[0].shape(), &g[0], 2)?;
                Ok(vec![a.add(&bilinear_upsample_backward(x[0].shape(), &g[1], 4)?)?])
            },
        ),
        "nearest_upsample" => Problem::plain(
            vec![randn(&[2, 3, 3], rng)],
            |x| Ok(vec![nearest_upsample(&x[0], 2)?]),
            |_, g| Ok(vec![nearest_upsample_backward(&g[0], 2)?]),
        ),
        "pixel_shuffle" => Problem::plain(
            vec![randn(&[8, 3, 3], rng)],
            |x| Ok(vec![pixel_shuffle(&x[0], 2)?]),
            |_, g| Ok(vec![pixel_unshuffle(&g[0], 2)?]),
        ),
        "concat_channels" => Problem::plain(
            vec![randn(&[2, 3, 3], rng), randn(&[3, 3, 3], rng)],
            |x| Ok(vec![concat_channels(&x[0], &x[1])?]),
            |_, g| {
                let (a, b) = split_channels(&g[0], 2)?;
                Ok(vec![a, b])
            },
        ),
        "scale_channels" => Problem::plain(
            vec![randn(&[3, 2, 2], rng), randn(&[3], rng)],
            |x| Ok(vec![scale_channels(&x[0], &x[1])?]),
            |x, g| {
                let (gx, gg) = scale_channels_backward(&x[0], &x[1], &g[0])?;
                Ok(vec![gx, gg])
            },
        ),
        "compatibility" => Problem::plain(
            vec![randn(&[3, 4], rng), randn(&[4, 5], rng)],
            |x| Ok(vec![Compatibility::forward(&x[0], &x[1], 4)?.map().values]),
            |x, g| {
                let (gq, gk) = Compatibility::forward(&x[0], &x[1], 4)?.backward(&g[0])?;
                Ok(vec![gq, gk])
            },
        ),
        "collect_context" => {
            let params = CollectorParams {
                entities: LinearParams {
                    weight: orthonormal_rows(2, 4, rng),
                    bias: None,
                },
                embed: LinearParams::kaiming(8, 4, false, rng),
                gcn: GcnParams::init(8, rng),
            };
            Problem::with_params(
                vec![randn(&[4, 3, 3], rng)],
                jitter(params, 0.1, rng),
                |x, p| Ok(vec![collect_forward(&x[0], p)?.0]),
                |x, p, g| {
                    let (_, t) = collect_forward(&x[0], p)?;
                    let (gx, gp) = collect_backward(p, &t, &g[0])?;
                    Ok((vec![gx.into_reshape(x[0].shape())?], gp))
                },
            )
        }
        "orthogonal_reg_loss" => {
            let mut params = MgcParams::init(8, 2, &[4, 4], &[3, 2], 0.5, rng)?;
            params = jitter(params, 0.2, rng);
            params.lambda_o = 0.5;
            Problem::with_params(
                vec![],
                params,
                |_, p| Ok(vec![Tensor::new(&[1], vec![orthogonal_reg_loss(p)])?]),
                |_, p, g| Ok((vec![], orthogonal_reg_grad(p)?.scaled(g[0].data()[0]))),
            )
        }
        "gcn_layer" => Problem::with_params(
            vec![randn(&[8, 3], rng)],
            jitter(GcnParams::init(8, rng), 0.1, rng),
            |x, p| Ok(vec![gcn_forward(&x[0], p)?.0]),
            |x, p, g| {
                let (_, t) = gcn_forward(&x[0], p)?;
                let (gx, gp) = gcn_backward(p, &t, &g[0])?;
                Ok((vec![gx], gp))
            },
        ),
        "reason_multilevel" => Problem::with_params(
            vec![randn(&[8, 2], rng), randn(&[8, 3], rng)],
            jitter(GcnParams::init(8, rng), 0.1, rng),
            |x, p| Ok(vec![gcn_forward(&concat_columns(x)?, p)?.0]),
            |x, p, g| {
                let (_, t) = gcn_forward(&concat_columns(x)?, p)?;
                let (gx, gp) = gcn_backward(p, &t, &g[0])?;
                Ok((split_columns(&gx, &[2, 3])?, gp))
            },
        ),
        "distribute_context" => {
            let params = DistributeSet {
                level: DistributorParams {
                    query: LinearParams::kaiming(8, 4, false, rng),
                    residual: LinearParams::kaiming(8, 4, false, rng),
                },
                output: LinearParams::kaiming(8, 8, false, rng),
            };
            Problem::with_params(
                vec![randn(&[4, 2, 2], rng), randn(&[8, 2], rng)],
                jitter(params, 0.1, rng),
                |x, p| Ok(vec![distribute_forward(&x[0], &x[1], &p.level, &p.output)?.0]),
                |x, p, g| {
                    let (_, t) = distribute_forward(&x[0], &x[1], &p.level, &p.output)?;
                    let (gx, gb, gl, go) = distribute_backward(&p.level, &p.output, &t, &g[0])?;
                    Ok((
                        vec![gx.into_reshape(x[0].shape())?, gb],
                        DistributeSet { level: gl, output: go },
                    ))
                },
            )
        }
        "mgc_forward" => {
            let chans = [3, 4, 5, 6, 8];
            let sizes = [6, 3, 2, 1, 1];
            let data = chans.iter().zip(sizes).map(|(&c, s)| randn(&[c, s, s], rng)).collect();
            let params = MgcParams::init(8, 2, &chans, &[4, 3, 2, 1], 0.0, rng)?;
            Problem::with_params(
                data,
                jitter(params, 0.1, rng),
                |x, p| Ok(maps(mgc_forward_traced(&as_levels(x, 2), p)?.0)),
                |x, p, g| {
                    let (_, t) = mgc_forward_traced(&as_levels(x, 2), p)?;
                    mgc_backward(p, &t, g)
                },
            )
            .coords(12)
        }
        "predict_up_kernels" | "predict_down_kernels" => {
            let up = op == "predict_up_kernels";
            let spec = fusion_spec(4, true, true, GateAct::TwoSigmoid);
            let (fp, dir, side) = if up {
                (FusionParams::init_up(&spec, rng)?, Direction::Up, 3)
            } else {
                (FusionParams::init_down(&spec, rng)?, Direction::Down, 6)
            };
            Problem::with_params(
                vec![randn(&[4, side, side], rng), randn(&[4, side, side], rng)],
                jitter(fp.kernels, 0.1, rng),
                move |x, p: &KernelPredictorParams<T>| {
                    Ok(vec![predict_forward(p, dir, &concat_channels(&x[0], &x[1])?)?.0])
                },
                move |x, p, g| {
                    let (_, t) = predict_forward(p, dir, &concat_channels(&x[0], &x[1])?)?;
                    let (gi, gp) = predict_backward(p, dir, &t, &g[0])?;
                    let (a, b) = split_channels(&gi, 4)?;
                    Ok((vec![a, b], gp))
                },
            )
        }
        "reassemble_up" | "reassemble_down" => {
            let up = op == "reassemble_up";
            let (src, ks) = if up {
                ([2, 3, 3], [25, 6, 6])
            } else {
                ([2, 6, 6], [25, 3, 3])
            };
            let kernels = softmax(&randn(&ks, rng), 0)?;
            Problem::plain(
                vec![randn(&src, rng), kernels],
                move |x| {
                    let k = ReassemblyKernels { values: x[1].clone() };
                    Ok(vec![if up {
                        reassemble_up(&x[0], &k)?
                    } else {
                        reassemble_down(&x[0], &k)?
                    }])
                },
                move |x, g| {
                    let k = ReassemblyKernels { values: x[1].clone() };
                    let (gs, gk) = if up {
                        reassemble_up_backward(&x[0], &k, &g[0])?
                    } else {
                        reassemble_down_backward(&x[0], &k, &g[0])?
                    };
                    Ok(vec![gs, gk])
                },
            )
        }
        "channel_gates" | "channel_gates_sigmoid" => {
            let act = if op == "channel_gates" {
                GateAct::TwoSigmoid
            } else {
                GateAct::Sigmoid
            };
            Problem::with_params(
                vec![randn(&[8, 3, 3], rng), randn(&[8, 3, 3], rng)],
                jitter(ChannelAttentionParams::init(8, rng), 0.1, rng),
                move |x, p| {
                    let (g, _) = gates_forward(p, act, &concat_channels(&x[0], &x[1])?)?;
                    Ok(vec![g.high, g.low])
                },
                move |x, p, g| {
                    let both = concat_channels(&x[0], &x[1])?;
                    let (_, t) = gates_forward(p, act, &both)?;
                    let (gf, gp) = gates_backward(p, act, &t, &g[0], &g[1])?;
                    let (a, b) = split_channels(&gf.into_reshape(both.shape())?, 8)?;
                    Ok((vec![a, b], gp))
                },
            )
        }
        "fuse_topdown" | "carafe_baseline" => {
            let ga = op == "fuse_topdown";
            let params = FusionParams::init_up(&fusion_spec(8, ga, ga, GateAct::TwoSigmoid), rng)?;
            Problem::with_params(
                vec![randn(&[8, 2, 2], rng), randn(&[8, 4, 4], rng)],
                jitter(params, 0.1, rng),
                move |x, p| {
                    let (u, l) = (LevelFeature::new(4, x[0].clone()), LevelFeature::new(3, x[1].clone()));
                    let out = if ga {
                        fuse_topdown_traced(&u, &l, p)?.0
                    } else {
                        carafe_baseline(&u, &l, p)?
                    };
                    Ok(vec![out.map])
                },
                |x, p, g| {
                    let (u, l) = (LevelFeature::new(4, x[0].clone()), LevelFeature::new(3, x[1].clone()));
                    let (_, t) = fuse_topdown_traced(&u, &l, p)?;
                    let fg = fuse_backward(p, &t, &g[0])?;
                    Ok((vec![fg.first, fg.second], fg.params))
                },
            )
        }
        "fuse_bottomup" | "cap_baseline" => {
            let ga = op == "fuse_bottomup";
            let params = FusionParams::init_down(&fusion_spec(8, ga, ga, GateAct::TwoSigmoid), rng)?;
            Problem::with_params(
                vec![randn(&[8, 4, 4], rng), randn(&[8, 2, 2], rng)],
                jitter(params, 0.1, rng),
                move |x, p| {
                    let (lo, td) = (LevelFeature::new(3, x[0].clone()), LevelFeature::new(4, x[1].clone()));
                    let out = if ga {
                        fuse_bottomup_traced(&lo, &td, p)?.0
                    } else {
                        cap_baseline(&lo, &td, p)?
                    };
                    Ok(vec![out.map])
                },
                |x, p, g| {
                    let (lo, td) = (LevelFeature::new(3, x[0].clone()), LevelFeature::new(4, x[1].clone()));
                    let (_, t) = fuse_bottomup_traced(&lo, &td, p)?;
                    let fg = fuse_backward(p, &t, &g[0])?;
                    Ok((vec![fg.first, fg.second], fg.params))
                },
            )
        }
        "toy_backbone" => {
            let spec = BackboneSpec { channels: [2, 3, 4, 5] };
            Problem::with_params(
                vec![randn(&[3, 64, 64], rng)],
                jitter(BackboneParams::init(&spec, rng), 0.05, rng),
                |x, p| Ok(maps(toy_backbone_forward_traced(&x[0], p)?.0)),
                |x, p, g| {
                    let (_, t) = toy_backbone_forward_traced(&x[0], p)?;
                    let (gx, gp) = toy_backbone_backward(p, &t, g)?;
                    Ok((vec![gx], gp))
                },
            )
            .coords(16)
        }
        "make_extra_level" => Problem::with_params(
            vec![randn(&[5, 4, 4], rng)],
            jitter(ConvParams::kaiming(5, 4, 3, 2, true, rng), 0.1, rng),
            |x, p| Ok(vec![make_extra_level(&LevelFeature::new(5, x[0].clone()), p)?.map]),
            |x, p, g| {
                let (gx, gp) = conv2d_backward(p, &x[0], &g[0])?;
                Ok((vec![gx], gp))
            },
        ),
        "forward_fpn" | "forward_pafpn" => {
            let chans = [3, 4, 5, 6];
            let params = FpnParams::init(&chans, 4, op == "forward_pafpn", rng);
            Problem::with_params(
                backbone_levels(&chans, 16, rng),
                jitter(params, 0.1, rng),
                |x, p| Ok(maps(forward_fpn_traced(&as_levels(x, 2), p)?.0)),
                |x, p, g| {
                    let (_, t) = forward_fpn_traced(&as_levels(x, 2), p)?;
                    fpn_backward(p, &t, g)
                },
            )
            .coords(12)
        }
        "forward_a2fpn" | "forward_a2fpn_lite" => {
            let arch = if op == "forward_a2fpn" {
                Arch::A2fpn
            } else {
                Arch::A2fpnLite
            };
            let cfg = tiny_a2fpn_config(arch);
            let params = A2fpnParams::init(&cfg, rng)?;
            Problem::with_params(
                backbone_levels(&cfg.backbone.channels, 32, rng),
                jitter(params, 0.1, rng),
                |x, p| Ok(maps(forward_a2fpn_traced(&as_levels(x, 2), p)?.0)),
                |x, p, g| {
                    let (_, t) = forward_a2fpn_traced(&as_levels(x, 2), p)?;
                    a2fpn_backward(p, &t, g)
                },
            )
            .coords(4)
        }
        "segmentation_loss" => {
            let mut cfg = tiny_a2fpn_config(Arch::A2fpn);
            cfg.lambda_o = 0.01;
            let sample = synthetic_dataset::<T>(1, 64, 64, 3).remove(0);
            let net = jitter(SegmentationNet::<T>::init(&cfg)?, 0.05, rng);
            let s2 = sample.clone();
            Problem::with_params(
                vec![],
                net,
                move |_, n| {
                    let loss = crate::pyramid::train::bce_with_logits(&n.predict(&sample.image)?, &sample.mask)?.0;
                    Ok(vec![Tensor::new(&[1], vec![loss + n.model.neck.reg_loss()])?])
                },
                move |_, n, g| {
                    let (_, mut grads) = n.loss_and_grad(&s2)?;
                    n.model.neck.add_reg_grad(&mut grads.model.neck)?;
                    Ok((vec![], grads.scaled(g[0].data()[0])))
                },
            )
            .coords(4)
        }
        other => return Err(Error::Config(format!("unknown gradcheck op '{other}'"))),
    };
    Ok(p)
}

trait Scaled {
    fn scaled(self, k: f64) -> Self;
}

impl<P: ParamSet<T>> Scaled for P {
    fn scaled(mut self, k: f64) -> Self {
        self.visit_mut("", &mut |_, t| t.data_mut().iter_mut().for_each(|v| *v *= k));
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let x = Tensor::<f64>::from_f64(&[4], &[1.0, -2.0, 3.0, 0.5]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.sum()), &x, 1e-5).unwrap();
        assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn half_square_gives_identity() {
        let x = Tensor::<f64>::from_f64(&[3], &[0.3, -1.2, 2.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(0.5 * t.dot(t)?), &x, 1e-5).unwrap();
        assert!(g.max_abs_diff(&x) < 1e-9);
    }

    #[test]
    fn softmax_cross_entropy_gradient() {
        let z = Tensor::<f64>::from_f64(&[5], &[0.2, -1.0, 0.7, 1.5, -0.3]).unwrap();
        let target = 3;
        let ce = |t: &Tensor<f64>| -> Result<f64> { Ok(-softmax(t, 0)?.data()[target].ln()) };
        let g = finite_diff_grad(ce, &z, 1e-5).unwrap();
        let mut want = softmax(&z, 0).unwrap();
        want.data_mut()[target] -= 1.0;
        for (a, n) in want.data().iter().zip(g.data()) {
            assert!(rel_err(*a, *n) < 1e-6);
        }
    }

    #[test]
    fn zero_tolerance_fails() {
        let opts = GradCheckOptions {
            tol: Some(0.0),
            ..Default::default()
        };
        assert!(!check_gradients("matmul", &opts).unwrap().passed);
    }

    #[test]
    fn unknown_op_is_config_error() {
        assert!(matches!(
            check_gradients("nope", &GradCheckOptions::default()),
            Err(Error::Config(_))
        ));
    }
}

//! Content-aware fusion of adjacent pyramid levels.
//!
//! Top-down sites upsample the coarser map with predicted reassembly
//! kernels, bottom-up sites downsample the finer map the same way. Kernels
//! are predicted from the concatenation of both neighbours (or from the
//! resampled source alone when guidance is off), and the two merged maps
//! are reweighted per channel before addition.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, ensure_dim, Result};
use crate::level::LevelFeature;
use crate::nn::{
    bilinear_upsample, bilinear_upsample_backward, concat_channels, conv2d, conv2d_backward, max_pool2d,
    max_pool2d_backward, pixel_shuffle, pixel_unshuffle, scale_channels, scale_channels_backward, split_channels,
    PoolIndices,
};
use crate::params::{join, ConvParams, LinearParams, ParamSet};
use crate::tensor::{
    layer_norm, layer_norm_backward, matmul, matmul_backward, relu, relu_backward, sigmoid, sigmoid_backward, softmax,
    softmax_backward, two_sigmoid, two_sigmoid_backward, Scalar, Tensor, LN_EPS,
};

/// Resampling factor between adjacent levels.
pub const SCALE: usize = 2;

/// Standard deviation of the final kernel-predictor conv at init.
pub const PREDICTOR_INIT_STD: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GateAct {
    Sigmoid,
    #[default]
    TwoSigmoid,
}

impl GateAct {
    fn forward<T: Scalar>(self, t: &Tensor<T>) -> Tensor<T> {
        match self {
            GateAct::Sigmoid => sigmoid(t),
            GateAct::TwoSigmoid => two_sigmoid(t),
        }
    }

    fn backward<T: Scalar>(self, y: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            GateAct::Sigmoid => sigmoid_backward(y, g),
            GateAct::TwoSigmoid => two_sigmoid_backward(y, g),
        }
    }
}

/// Softmax-normalized `k² × H × W` kernels, one per output location.
#[derive(Clone, Debug, PartialEq)]
pub struct ReassemblyKernels<T> {
    pub values: Tensor<T>,
}

impl<T: Scalar> ReassemblyKernels<T> {
    /// Side length `k` of each kernel.
    pub fn size(&self) -> Result<usize> {
        let kk = self.values.shape()[0];
        let k = (kk as f64).sqrt().round() as usize;
        ensure_dim!(k * k == kk && k % 2 == 1, "{kk} taps is not an odd square");
        Ok(k)
    }
}

/// Per-channel gates: `high` weights the first merged operand, `low` the
/// second.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelGates<T> {
    pub high: Tensor<T>,
    pub low: Tensor<T>,
}

/// Compressor (1×1), encoder (3×3 + ReLU) and predictor (`k_en×k_en`).
#[derive(Clone, Debug, PartialEq)]
pub struct KernelPredictorParams<T> {
    pub compressor: ConvParams<T>,
    pub encoder: ConvParams<T>,
    pub predictor: ConvParams<T>,
}

impl<T: Scalar> ParamSet<T> for KernelPredictorParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.compressor.visit(&join(prefix, "compressor"), f);
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.predictor.visit(&join(prefix, "predictor"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.compressor.visit_mut(&join(prefix, "compressor"), f);
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.predictor.visit_mut(&join(prefix, "predictor"), f);
    }
}

/// Attention-pooled squeeze followed by a LayerNorm bottleneck.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelAttentionParams<T> {
    /// `1 × 2c` spatial mask projection
    pub mask: LinearParams<T>,
    /// `c/2 × 2c`
    pub squeeze: LinearParams<T>,
    pub ln_gain: Tensor<T>,
    pub ln_shift: Tensor<T>,
    /// `2c × c/2`
    pub excite: LinearParams<T>,
}

impl<T: Scalar> ChannelAttentionParams<T> {
    pub fn init<R: Rng + ?Sized>(c: usize, rng: &mut R) -> Self {
        let half = c / 2;
        Self {
            mask: LinearParams::kaiming(1, 2 * c, false, rng),
            squeeze: LinearParams::kaiming(half, 2 * c, false, rng),
            ln_gain: Tensor::full(&[half], T::one()),
            ln_shift: Tensor::zeros(&[half]),
            excite: LinearParams::kaiming(2 * c, half, false, rng),
        }
    }
}

impl<T: Scalar> ParamSet<T> for ChannelAttentionParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.mask.visit(&join(prefix, "w1"), f);
        self.squeeze.visit(&join(prefix, "w2"), f);
        f(join(prefix, "ln.gain"), &self.ln_gain);
        f(join(prefix, "ln.shift"), &self.ln_shift);
        self.excite.visit(&join(prefix, "w3"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.mask.visit_mut(&join(prefix, "w1"), f);
        self.squeeze.visit_mut(&join(prefix, "w2"), f);
        f(join(prefix, "ln.gain"), &mut self.ln_gain);
        f(join(prefix, "ln.shift"), &mut self.ln_shift);
        self.excite.visit_mut(&join(prefix, "w3"), f);
    }
}

/// Hyper-parameters of one fusion site.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionSpec {
    pub channels: usize,
    pub kernel_size: usize,
    pub encoder_kernel: usize,
    pub compressed: usize,
    pub gate_act: GateAct,
    /// Predict kernels from both neighbours rather than the source alone.
    pub guided: bool,
    /// Learn channel gates; otherwise both gates are fixed to 1.
    pub gated: bool,
    /// Append the 3×3 anti-alias conv after the merge.
    pub smooth: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams<T> {
    pub kernels: KernelPredictorParams<T>,
    pub attention: Option<ChannelAttentionParams<T>>,
    pub smooth: Option<ConvParams<T>>,
    pub gate_act: GateAct,
    pub kernel_size: usize,
    pub guided: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Direction {
    Up,
    Down,
}

impl<T: Scalar> FusionParams<T> {
    /// Top-down site; the predictor emits `4·k²` channels at the coarse
    /// resolution.
    pub fn init_up<R: Rng + ?Sized>(spec: &FusionSpec, rng: &mut R) -> Result<Self> {
        Self::init(spec, Direction::Up, rng)
    }

    /// Bottom-up site; the predictor is strided and emits `k²` channels.
    pub fn init_down<R: Rng + ?Sized>(spec: &FusionSpec, rng: &mut R) -> Result<Self> {
        Self::init(spec, Direction::Down, rng)
    }

    fn init<R: Rng + ?Sized>(spec: &FusionSpec, dir: Direction, rng: &mut R) -> Result<Self> {
        let c = spec.channels;
        if spec.kernel_size.is_multiple_of(2) || spec.encoder_kernel.is_multiple_of(2) {
            return Err(dim_err!(
                "kernel sizes must be odd, got k={} k_en={}",
                spec.kernel_size,
                spec.encoder_kernel
            ));
        }
        ensure_dim!(c >= 2 && c.is_multiple_of(2), "fusion width {c} must be even");
        let kk = spec.kernel_size * spec.kernel_size;
        let src = if spec.guided { 2 * c } else { c };
        let (pred_out, pred_stride) = match dir {
            Direction::Up => (SCALE * SCALE * kk, 1),
            Direction::Down => (kk, SCALE),
        };
        let kernels = KernelPredictorParams {
            compressor: ConvParams::kaiming(src, spec.compressed, 1, 1, true, rng),
            encoder: ConvParams::kaiming(spec.compressed, spec.compressed, 3, 1, true, rng),
            predictor: ConvParams::normal(
                spec.compressed,
                pred_out,
                spec.encoder_kernel,
                pred_stride,
                true,
                PREDICTOR_INIT_STD,
                rng,
            ),
        };
        Ok(Self {
            kernels,
            attention: spec.gated.then(|| ChannelAttentionParams::init(c, rng)),
            smooth: spec.smooth.then(|| ConvParams::kaiming(c, c, 3, 1, true, rng)),
            gate_act: spec.gate_act,
            kernel_size: spec.kernel_size,
            guided: spec.guided,
        })
    }

    fn direction(&self) -> Direction {
        if self.kernels.predictor.stride == 1 {
            Direction::Up
        } else {
            Direction::Down
        }
    }
}

impl<T: Scalar> ParamSet<T> for FusionParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.kernels.visit(&join(prefix, "kpred"), f);
        self.attention.visit(&join(prefix, "gate"), f);
        self.smooth.visit(&join(prefix, "smooth"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.kernels.visit_mut(&join(prefix, "kpred"), f);
        self.attention.visit_mut(&join(prefix, "gate"), f);
        self.smooth.visit_mut(&join(prefix, "smooth"), f);
    }
}

#[derive(Clone, Debug)]
pub(crate) struct PredictTrace<T> {
    input: Tensor<T>,
    compressed: Tensor<T>,
    encoded_pre: Tensor<T>,
    encoded: Tensor<T>,
    kernels: Tensor<T>,
}

pub(crate) fn predict_forward<T: Scalar>(
    p: &KernelPredictorParams<T>,
    dir: Direction,
    guide: &Tensor<T>,
) -> Result<(Tensor<T>, PredictTrace<T>)> {
    let compressed = conv2d(&p.compressor, guide)?;
    let encoded_pre = conv2d(&p.encoder, &compressed)?;
    let encoded = relu(&encoded_pre);
    let raw = conv2d(&p.predictor, &encoded)?;
    let logits = match dir {
        Direction::Up => pixel_shuffle(&raw, SCALE)?,
        Direction::Down => raw,
    };
    let kernels = softmax(&logits, 0)?;
    Ok((
        kernels.clone(),
        PredictTrace {
            input: guide.clone(),
            compressed,
            encoded_pre,
            encoded,
            kernels,
        },
    ))
}

pub(crate) fn predict_backward<T: Scalar>(
    p: &KernelPredictorParams<T>,
    dir: Direction,
    t: &PredictTrace<T>,
    g_kernels: &Tensor<T>,
) -> Result<(Tensor<T>, KernelPredictorParams<T>)> {
    let g_logits = softmax_backward(&t.kernels, g_kernels, 0)?;
    let g_raw = match dir {
        Direction::Up => pixel_unshuffle(&g_logits, SCALE)?,
        Direction::Down => g_logits,
    };
    let (g_enc, g_pred) = conv2d_backward(&p.predictor, &t.encoded, &g_raw)?;
    let g_enc_pre = relu_backward(&t.encoded_pre, &g_enc)?;
    let (g_comp, g_encoder) = conv2d_backward(&p.encoder, &t.compressed, &g_enc_pre)?;
    let (g_in, g_compressor) = conv2d_backward(&p.compressor, &t.input, &g_comp)?;
    Ok((
        g_in,
        KernelPredictorParams {
            compressor: g_compressor,
            encoder: g_encoder,
            predictor: g_pred,
        },
    ))
}

fn check_predictor<T: Scalar>(p: &FusionParams<T>, dir: Direction) -> Result<()> {
    ensure_dim!(
        p.direction() == dir,
        "fusion params were built for the {:?} direction",
        p.direction()
    );
    Ok(())
}

/// Kernels for upsampling `coarse` by 2. `fine_pooled` is the finer
/// neighbour already pooled to the coarse grid; it is ignored when the
/// site is unguided.
pub fn predict_up_kernels<T: Scalar>(
    coarse: &Tensor<T>,
    fine_pooled: &Tensor<T>,
    p: &FusionParams<T>,
) -> Result<ReassemblyKernels<T>> {
    check_predictor(p, Direction::Up)?;
    let guide = if p.guided {
        concat_channels(coarse, fine_pooled)?
    } else {
        coarse.clone()
    };
    Ok(ReassemblyKernels {
        values: predict_forward(&p.kernels, Direction::Up, &guide)?.0,
    })
}

/// Kernels for downsampling `fine` by 2. `coarse_up` is the coarser
/// neighbour already upsampled to the fine grid.
pub fn predict_down_kernels<T: Scalar>(
    fine: &Tensor<T>,
    coarse_up: &Tensor<T>,
    p: &FusionParams<T>,
) -> Result<ReassemblyKernels<T>> {
    check_predictor(p, Direction::Down)?;
    let guide = if p.guided {
        concat_channels(fine, coarse_up)?
    } else {
        fine.clone()
    };
    Ok(ReassemblyKernels {
        values: predict_forward(&p.kernels, Direction::Down, &guide)?.0,
    })
}

/// Shared geometry of both reassembly directions: output location
/// `(y, x)` reads the `k×k` window of the source centred at
/// `(num·y / den, num·x / den)`.
struct Window {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    ho: usize,
    wo: usize,
    up: bool,
}

impl Window {
    #[inline]
    fn centre(&self, o: usize) -> usize {
        if self.up {
            o / SCALE
        } else {
            o * SCALE
        }
    }

    /// Calls `f(source_offset_within_channel, kernel_offset, out_offset_within_channel)`
    /// for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let r = (self.k / 2) as isize;
        let plane = self.ho * self.wo;
        for oy in 0..self.ho {
            let cy = self.centre(oy) as isize;
            for ox in 0..self.wo {
                let cx = self.centre(ox) as isize;
                let o = oy * self.wo + ox;
                for dy in 0..self.k {
                    let sy = cy + dy as isize - r;
                    if sy < 0 || sy >= self.h as isize {
                        continue;
                    }
                    for dx in 0..self.k {
                        let sx = cx + dx as isize - r;
                        if sx < 0 || sx >= self.w as isize {
                            continue;
                        }
                        let tap = dy * self.k + dx;
                        f(sy as usize * self.w + sx as usize, tap * plane + o, o);
                    }
                }
            }
        }
    }
}

fn window<T: Scalar>(src: &Tensor<T>, kernels: &Tensor<T>, up: bool) -> Result<Window> {
    let (c, h, w) = src.dims3()?;
    let (kk, ho, wo) = kernels.dims3()?;
    let k = ReassemblyKernels {
        values: kernels.clone(),
    }
    .size()?;
    debug_assert_eq!(k * k, kk);
    let (eh, ew) = if up {
        (h * SCALE, w * SCALE)
    } else {
        ensure_dim!(h % SCALE == 0 && w % SCALE == 0, "cannot downsample {h}×{w} by {SCALE}");
        (h / SCALE, w / SCALE)
    };
    ensure_dim!(
        (ho, wo) == (eh, ew),
        "kernels cover {ho}×{wo}, reassembly of {h}×{w} needs {eh}×{ew}"
    );
    Ok(Window { c, h, w, k, ho, wo, up })
}

fn reassemble<T: Scalar>(src: &Tensor<T>, kernels: &Tensor<T>, up: bool) -> Result<Tensor<T>> {
    let g = window(src, kernels, up)?;
    let (plane_in, plane_out) = (g.h * g.w, g.ho * g.wo);
    let mut out = vec![T::zero(); g.c * plane_out];
    let kv = kernels.data();
    let sv = src.data();
    for ch in 0..g.c {
        let s = &sv[ch * plane_in..(ch + 1) * plane_in];
        let o = &mut out[ch * plane_out..(ch + 1) * plane_out];
        g.for_each_tap(|si, ki, oi| o[oi] = o[oi] + kv[ki] * s[si]);
    }
    Tensor::new(&[g.c, g.ho, g.wo], out)
}

fn reassemble_backward<T: Scalar>(
    src: &Tensor<T>,
    kernels: &Tensor<T>,
    gy: &Tensor<T>,
    up: bool,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = window(src, kernels, up)?;
    ensure_dim!(gy.shape() == [g.c, g.ho, g.wo], "reassembly adjoint shape mismatch");
    let (plane_in, plane_out) = (g.h * g.w, g.ho * g.wo);
    let mut gs = vec![T::zero(); src.len()];
    let mut gk = vec![T::zero(); kernels.len()];
    let kv = kernels.data();
    for ch in 0..g.c {
        let s = &src.data()[ch * plane_in..(ch + 1) * plane_in];
        let go = &gy.data()[ch * plane_out..(ch + 1) * plane_out];
        let gsc = &mut gs[ch * plane_in..(ch + 1) * plane_in];
        g.for_each_tap(|si, ki, oi| {
            gsc[si] = gsc[si] + kv[ki] * go[oi];
            gk[ki] = gk[ki] + s[si] * go[oi];
        });
    }
    Ok((Tensor::new(src.shape(), gs)?, Tensor::new(kernels.shape(), gk)?))
}

/// Upsamples `coarse` by 2: output `(y, x)` is the kernel-weighted sum of
/// the zero-padded `k×k` window around `(⌊y/2⌋, ⌊x/2⌋)`.
pub fn reassemble_up<T: Scalar>(coarse: &Tensor<T>, kernels: &ReassemblyKernels<T>) -> Result<Tensor<T>> {
    reassemble(coarse, &kernels.values, true)
}

/// Adjoints of the source map and of the kernels.
pub fn reassemble_up_backward<T: Scalar>(
    coarse: &Tensor<T>,
    kernels: &ReassemblyKernels<T>,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    reassemble_backward(coarse, &kernels.values, gy, true)
}

/// Downsamples `fine` by 2: output `(y, x)` is the kernel-weighted sum of
/// the zero-padded `k×k` window around `(2y, 2x)`.
pub fn reassemble_down<T: Scalar>(fine: &Tensor<T>, kernels: &ReassemblyKernels<T>) -> Result<Tensor<T>> {
    reassemble(fine, &kernels.values, false)
}

pub fn reassemble_down_backward<T: Scalar>(
    fine: &Tensor<T>,
    kernels: &ReassemblyKernels<T>,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    reassemble_backward(fine, &kernels.values, gy, false)
}

#[derive(Clone, Debug)]
pub(crate) struct GateTrace<T> {
    input: Tensor<T>,
    mask: Tensor<T>,
    descriptor: Tensor<T>,
    squeezed: Tensor<T>,
    normed: Tensor<T>,
    hidden: Tensor<T>,
    gates: Tensor<T>,
}

pub(crate) fn gates_forward<T: Scalar>(
    p: &ChannelAttentionParams<T>,
    act: GateAct,
    x: &Tensor<T>,
) -> Result<(ChannelGates<T>, GateTrace<T>)> {
    let (c2, h, w) = x.dims3()?;
    ensure_dim!(
        p.mask.in_dim() == c2,
        "channel attention expects {} channels, got {c2}",
        p.mask.in_dim()
    );
    let flat = x.reshape(&[c2, h * w])?;
    let mask = softmax(&p.mask.forward(&flat)?, 1)?; // 1 × hw
    let descriptor = matmul(&flat, &mask.transpose()?)?; // 2c × 1
    let half = p.squeeze.out_dim();
    let squeezed = p.squeeze.forward(&descriptor)?.into_reshape(&[half])?;
    let normed = layer_norm(&squeezed, &p.ln_gain, &p.ln_shift, LN_EPS)?;
    let hidden = relu(&normed).into_reshape(&[half, 1])?;
    let pre = p.excite.forward(&hidden)?.into_reshape(&[c2])?;
    let gates = act.forward(&pre);
    let c = c2 / 2;
    let gates_split = ChannelGates {
        high: Tensor::new(&[c], gates.data()[..c].to_vec())?,
        low: Tensor::new(&[c], gates.data()[c..].to_vec())?,
    };
    Ok((
        gates_split,
        GateTrace {
            input: flat,
            mask,
            descriptor,
            squeezed,
            normed,
            hidden,
            gates,
        },
    ))
}

pub(crate) fn gates_backward<T: Scalar>(
    p: &ChannelAttentionParams<T>,
    act: GateAct,
    t: &GateTrace<T>,
    g_high: &Tensor<T>,
    g_low: &Tensor<T>,
) -> Result<(Tensor<T>, ChannelAttentionParams<T>)> {
    let c2 = t.gates.len();
    let half = t.squeezed.len();
    let mut g_gates = g_high.data().to_vec();
    g_gates.extend_from_slice(g_low.data());
    let g_gates = Tensor::new(&[c2], g_gates)?;
    let g_pre = act.backward(&t.gates, &g_gates)?.into_reshape(&[c2, 1])?;
    let (g_hidden, g_excite) = p.excite.backward(&t.hidden, &g_pre)?;
    let g_normed = relu_backward(&t.normed, &g_hidden.into_reshape(&[half])?)?;
    let ln = layer_norm_backward(&t.squeezed, &p.ln_gain, &g_normed, LN_EPS)?;
    let (g_desc, g_squeeze) = p.squeeze.backward(&t.descriptor, &ln.input.into_reshape(&[half, 1])?)?;
    let mask_t = t.mask.transpose()?;
    let (mut g_flat, g_mask_t) = matmul_backward(&t.input, &mask_t, &g_desc)?;
    let g_logits = softmax_backward(&t.mask, &g_mask_t.transpose()?, 1)?;
    let (g_flat_mask, g_mask) = p.mask.backward(&t.input, &g_logits)?;
    g_flat.add_assign(&g_flat_mask)?;
    Ok((
        g_flat,
        ChannelAttentionParams {
            mask: g_mask,
            squeeze: g_squeeze,
            ln_gain: ln.gain,
            ln_shift: ln.shift,
            excite: g_excite,
        },
    ))
}

/// Gates computed from the channel concatenation `[first, second]`. With
/// no attention parameters both gates are exactly 1.
pub fn channel_gates<T: Scalar>(first: &Tensor<T>, second: &Tensor<T>, p: &FusionParams<T>) -> Result<ChannelGates<T>> {
    let c = first.shape()[0];
    match &p.attention {
        Some(a) => Ok(gates_forward(a, p.gate_act, &concat_channels(first, second)?)?.0),
        None => {
            ensure_dim!(first.shape() == second.shape(), "gate inputs differ in shape");
            Ok(unit_gates(c))
        }
    }
}

fn unit_gates<T: Scalar>(c: usize) -> ChannelGates<T> {
    ChannelGates {
        high: Tensor::full(&[c], T::one()),
        low: Tensor::full(&[c], T::one()),
    }
}

/// Everything [`fuse_backward`] needs from one fusion site.
#[derive(Clone, Debug)]
pub struct FusionTrace<T> {
    dir: Direction,
    source: Tensor<T>,
    neighbour: Tensor<T>,
    /// Pool indices of the lateral map (top-down only).
    pool: Option<PoolIndices>,
    /// Shape of the map that was bilinearly upsampled (bottom-up only).
    td_shape: Vec<usize>,
    predict: PredictTrace<T>,
    resampled: Tensor<T>,
    gates: ChannelGates<T>,
    gate_trace: Option<GateTrace<T>>,
    merged: Tensor<T>,
}

/// Adjoints of a fusion site's two inputs, in the order the forward
/// function takes them, plus its parameter gradients.
pub struct FusionGrads<T> {
    pub first: Tensor<T>,
    pub second: Tensor<T>,
    pub params: FusionParams<T>,
}

fn merge_and_smooth<T: Scalar>(
    p: &FusionParams<T>,
    gates: &ChannelGates<T>,
    high: &Tensor<T>,
    low: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let merged = scale_channels(high, &gates.high)?.add(&scale_channels(low, &gates.low)?)?;
    let out = match &p.smooth {
        Some(s) => conv2d(s, &merged)?,
        None => merged.clone(),
    };
    Ok((out, merged))
}

fn tag<T>(like: &LevelFeature<T>, map: Tensor<T>) -> LevelFeature<T> {
    LevelFeature {
        level: like.level,
        stride: like.stride,
        map,
    }
}

/// Top-down site: merges the upsampled `upper` (`P^td_{i+1}`) into
/// `lateral` (`P^lc_i`).
pub fn fuse_topdown_traced<T: Scalar>(
    upper: &LevelFeature<T>,
    lateral: &LevelFeature<T>,
    p: &FusionParams<T>,
) -> Result<(LevelFeature<T>, FusionTrace<T>)> {
    check_predictor(p, Direction::Up)?;
    let (cu, hu, wu) = upper.map.dims3()?;
    let (cl, hl, wl) = lateral.map.dims3()?;
    ensure_dim!(
        cu == cl && hl == hu * SCALE && wl == wu * SCALE,
        "top-down fusion of {:?} into {:?}: upper must be half the lateral resolution",
        upper.map.shape(),
        lateral.map.shape()
    );
    let (pooled, idx) = max_pool2d(&lateral.map)?;
    let both = if p.guided || p.attention.is_some() {
        Some(concat_channels(&upper.map, &pooled)?)
    } else {
        None
    };
    let guide = if p.guided {
        both.clone().expect("concat")
    } else {
        upper.map.clone()
    };
    let (kernels, predict) = predict_forward(&p.kernels, Direction::Up, &guide)?;
    let resampled = reassemble(&upper.map, &kernels, true)?;
    let (gates, gate_trace) = match &p.attention {
        Some(a) => {
            let (g, t) = gates_forward(a, p.gate_act, both.as_ref().expect("concat"))?;
            (g, Some(t))
        }
        None => (unit_gates(cu), None),
    };
    let (out, merged) = merge_and_smooth(p, &gates, &resampled, &lateral.map)?;
    Ok((
        tag(lateral, out),
        FusionTrace {
            dir: Direction::Up,
            source: upper.map.clone(),
            neighbour: lateral.map.clone(),
            pool: Some(idx),
            td_shape: Vec::new(),
            predict,
            resampled,
            gates,
            gate_trace,
            merged,
        },
    ))
}

pub fn fuse_topdown<T: Scalar>(
    upper: &LevelFeature<T>,
    lateral: &LevelFeature<T>,
    p: &FusionParams<T>,
) -> Result<LevelFeature<T>> {
    Ok(fuse_topdown_traced(upper, lateral, p)?.0)
}

/// Bottom-up site: merges the downsampled `lower` (`P^bu_{i−1}`) into
/// `td` (`P^td_i`).
pub fn fuse_bottomup_traced<T: Scalar>(
    lower: &LevelFeature<T>,
    td: &LevelFeature<T>,
    p: &FusionParams<T>,
) -> Result<(LevelFeature<T>, FusionTrace<T>)> {
    check_predictor(p, Direction::Down)?;
    let (cl, hl, wl) = lower.map.dims3()?;
    let (ct, ht, wt) = td.map.dims3()?;
    ensure_dim!(
        cl == ct && hl == ht * SCALE && wl == wt * SCALE,
        "bottom-up fusion of {:?} into {:?}: lower must be twice the td resolution",
        lower.map.shape(),
        td.map.shape()
    );
    let both = if p.guided || p.attention.is_some() {
        let td_up = bilinear_upsample(&td.map, SCALE)?;
        Some(concat_channels(&lower.map, &td_up)?)
    } else {
        None
    };
    let guide = if p.guided {
        both.clone().expect("concat")
    } else {
        lower.map.clone()
    };
    let (kernels, predict) = predict_forward(&p.kernels, Direction::Down, &guide)?;
    let resampled = reassemble(&lower.map, &kernels, false)?;
    let (gates, gate_trace) = match &p.attention {
        Some(a) => {
            let (g, t) = gates_forward(a, p.gate_act, both.as_ref().expect("concat"))?;
            (g, Some(t))
        }
        None => (unit_gates(ct), None),
    };
    let (out, merged) = merge_and_smooth(p, &gates, &td.map, &resampled)?;
    Ok((
        tag(td, out),
        FusionTrace {
            dir: Direction::Down,
            source: lower.map.clone(),
            neighbour: td.map.clone(),
            pool: None,
            td_shape: td.map.shape().to_vec(),
            predict,
            resampled,
            gates,
            gate_trace,
            merged,
        },
    ))
}

pub fn fuse_bottomup<T: Scalar>(
    lower: &LevelFeature<T>,
    td: &LevelFeature<T>,
    p: &FusionParams<T>,
) -> Result<LevelFeature<T>> {
    Ok(fuse_bottomup_traced(lower, td, p)?.0)
}

/// Backward through either fusion direction. `first`/`second` follow the
/// argument order of the forward call: `(upper, lateral)` top-down,
/// `(lower, td)` bottom-up.
pub fn fuse_backward<T: Scalar>(p: &FusionParams<T>, t: &FusionTrace<T>, g_out: &Tensor<T>) -> Result<FusionGrads<T>> {
    let mut grads = p.zeros_like();
    let g_merged = match &p.smooth {
        Some(s) => {
            let (gm, gs) = conv2d_backward(s, &t.merged, g_out)?;
            grads.smooth = Some(gs);
            gm
        }
        None => g_out.clone(),
    };
    let (high, low) = match t.dir {
        Direction::Up => (&t.resampled, &t.neighbour),
        Direction::Down => (&t.neighbour, &t.resampled),
    };
    let (g_high, g_gate_high) = scale_channels_backward(high, &t.gates.high, &g_merged)?;
    let (g_low, g_gate_low) = scale_channels_backward(low, &t.gates.low, &g_merged)?;
    let (g_resampled, mut g_neighbour) = match t.dir {
        Direction::Up => (g_high, g_low),
        Direction::Down => (g_low, g_high),
    };
    let c = t.source.shape()[0];
    // adjoint of the [source-side, neighbour-side] concat, when one exists
    let mut g_both: Option<Tensor<T>> = None;
    if let (Some(a), Some(gt)) = (&p.attention, &t.gate_trace) {
        let (g_flat, g_attn) = gates_backward(a, p.gate_act, gt, &g_gate_high, &g_gate_low)?;
        grads.attention = Some(g_attn);
        // the concat always lives on the source grid
        let mut shape = t.source.shape().to_vec();
        shape[0] = 2 * c;
        g_both = Some(g_flat.into_reshape(&shape)?);
    }
    let (g_src_feat, g_kernels) =
        reassemble_backward(&t.source, &t.predict.kernels, &g_resampled, t.dir == Direction::Up)?;
    let (g_guide, g_kpred) = predict_backward(&p.kernels, t.dir, &t.predict, &g_kernels)?;
    grads.kernels = g_kpred;
    let mut g_source = g_src_feat;
    if p.guided {
        match &mut g_both {
            Some(gb) => gb.add_assign(&g_guide)?,
            None => g_both = Some(g_guide),
        }
    } else {
        g_source.add_assign(&g_guide)?;
    }
    if let Some(gb) = g_both {
        let (gs, go) = split_channels(&gb, c)?;
        g_source.add_assign(&gs)?;
        let g_n = match t.dir {
            Direction::Up => max_pool2d_backward(t.pool.as_ref().expect("pool indices"), &go)?,
            Direction::Down => bilinear_upsample_backward(&t.td_shape, &go, SCALE)?,
        };
        g_neighbour.add_assign(&g_n)?;
    }
    Ok(FusionGrads {
        first: g_source,
        second: g_neighbour,
        params: grads,
    })
}

/// Plain content-aware upsampling fusion: kernels from `upper` alone,
/// ungated addition, then the optional smooth conv.
pub fn carafe_baseline<T: Scalar>(
    upper: &LevelFeature<T>,
    lateral: &LevelFeature<T>,
    p: &FusionParams<T>,
) -> Result<LevelFeature<T>> {
    check_predictor(p, Direction::Up)?;
    ensure_dim!(
        p.kernels.compressor.in_ch() == upper.channels(),
        "baseline predictor must read the source feature alone"
    );
    let (kernels, _) = predict_forward(&p.kernels, Direction::Up, &upper.map)?;
    let merged = reassemble(&upper.map, &kernels, true)?.add(&lateral.map)?;
    let out = match &p.smooth {
        Some(s) => conv2d(s, &merged)?,
        None => merged,
    };
    Ok(tag(lateral, out))
}

/// Plain content-aware pooling fusion: kernels from `lower` alone,
/// ungated addition, then the optional smooth conv.
pub fn cap_baseline<T: Scalar>(
    lower: &LevelFeature<T>,
    td: &LevelFeature<T>,
    p: &FusionParams<T>,
) -> Result<LevelFeature<T>> {
    check_predictor(p, Direction::Down)?;
    ensure_dim!(
        p.kernels.compressor.in_ch() == lower.channels(),
        "baseline predictor must read the source feature alone"
    );
    let (kernels, _) = predict_forward(&p.kernels, Direction::Down, &lower.map)?;
    let merged = td.map.add(&reassemble(&lower.map, &kernels, false)?)?;
    let out = match &p.smooth {
        Some(s) => conv2d(s, &merged)?,
        None => merged,
    };
    Ok(tag(td, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(c: usize) -> FusionSpec {
        FusionSpec {
            channels: c,
            kernel_size: 5,
            encoder_kernel: 3,
            compressed: 4,
            gate_act: GateAct::TwoSigmoid,
            guided: true,
            gated: true,
            smooth: true,
        }
    }

    fn one_hot_centre(k: usize, h: usize, w: usize) -> ReassemblyKernels<f64> {
        let mut v = Tensor::zeros(&[k * k, h, w]);
        let centre = (k * k) / 2;
        for i in 0..h * w {
            v.data_mut()[centre * h * w + i] = 1.0;
        }
        ReassemblyKernels { values: v }
    }

    #[test]
    fn zero_predictor_gives_uniform_kernels() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let mut p = FusionParams::<f64>::init_up(&spec(4), &mut r).unwrap();
        p.kernels.predictor.weight.fill(0.0);
        let x = Tensor::randn(&[4, 3, 3], 1.0, &mut r);
        let k = predict_up_kernels(&x, &x, &p).unwrap();
        assert_eq!(k.values.shape(), &[25, 6, 6]);
        assert!(k.values.data().iter().all(|&v| (v - 1.0 / 25.0).abs() < 1e-15));
        let mut q = FusionParams::<f64>::init_down(&spec(4), &mut r).unwrap();
        q.kernels.predictor.weight.fill(0.0);
        let f = Tensor::randn(&[4, 6, 6], 1.0, &mut r);
        let k = predict_down_kernels(&f, &f, &q).unwrap();
        assert_eq!(k.values.shape(), &[25, 3, 3]);
        assert!(k.values.data().iter().all(|&v| (v - 1.0 / 25.0).abs() < 1e-15));
    }

    #[test]
    fn centre_kernels_are_nearest_and_strided() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn(&[2, 3, 3], 1.0, &mut r);
        let up = reassemble_up(&x, &one_hot_centre(5, 6, 6)).unwrap();
        assert_eq!(up, crate::nn::nearest_upsample(&x, 2).unwrap());
        let f = Tensor::<f64>::randn(&[2, 6, 4], 1.0, &mut r);
        let down = reassemble_down(&f, &one_hot_centre(3, 3, 2)).unwrap();
        for ch in 0..2 {
            for y in 0..3 {
                for x in 0..2 {
                    assert_eq!(down.at3(ch, y, x), f.at3(ch, 2 * y, 2 * x));
                }
            }
        }
    }

    #[test]
    fn zero_squeeze_gives_unit_gates() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let mut p = FusionParams::<f64>::init_up(&spec(4), &mut r).unwrap();
        p.attention.as_mut().unwrap().squeeze.weight.fill(0.0);
        let a = Tensor::randn(&[4, 2, 2], 1.0, &mut r);
        let b = Tensor::randn(&[4, 2, 2], 1.0, &mut r);
        let g = channel_gates(&a, &b, &p).unwrap();
        assert!(g.high.data().iter().chain(g.low.data()).all(|&v| v == 1.0));
    }

    #[test]
    fn sigmoid_gates_stay_below_one() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let mut s = spec(4);
        s.gate_act = GateAct::Sigmoid;
        let p = FusionParams::<f64>::init_up(&s, &mut r).unwrap();
        let a = Tensor::randn(&[4, 2, 2], 1.0, &mut r);
        let g = channel_gates(&a, &a, &p).unwrap();
        assert!(g.high.data().iter().chain(g.low.data()).all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn resolution_mismatch_is_rejected() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let p = FusionParams::<f64>::init_up(&spec(4), &mut r).unwrap();
        let upper = LevelFeature::new(4, Tensor::zeros(&[4, 2, 2]));
        let lateral = LevelFeature::new(3, Tensor::zeros(&[4, 6, 6]));
        assert!(fuse_topdown(&upper, &lateral, &p).is_err());
        let q = FusionParams::<f64>::init_down(&spec(4), &mut r).unwrap();
        assert!(fuse_topdown(&upper, &LevelFeature::new(3, Tensor::zeros(&[4, 4, 4])), &q).is_err());
    }
}

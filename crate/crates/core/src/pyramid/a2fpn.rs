//! The attention-aggregation neck: global context extraction followed by
//! content-aware top-down and bottom-up fusion.

use rand::Rng;

use crate::error::{ensure_dim, Result};
use crate::fusion::{fuse_backward, fuse_bottomup_traced, fuse_topdown_traced, FusionParams, FusionTrace};
use crate::level::LevelFeature;
use crate::mgc::{mgc_backward, mgc_forward_traced, MgcParams, MgcTrace};
use crate::nn::{conv2d, conv2d_backward, max_pool2d, max_pool2d_backward, PoolIndices};
use crate::params::{join, ConvParams, ParamSet};
use crate::tensor::{Scalar, Tensor};

use super::backbone::make_extra_level;
use super::config::PyramidConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct A2fpnParams<T> {
    /// Strided conv producing the stride-64 backbone level.
    pub extra: Option<ConvParams<T>>,
    pub mgc: MgcParams<T>,
    /// Top-down sites for levels `2..top`, finest first.
    pub top_down: Vec<FusionParams<T>>,
    pub seed_smooth: Option<ConvParams<T>>,
    /// Bottom-up sites for levels `3..=top`, finest first.
    pub bottom_up: Vec<FusionParams<T>>,
}

impl<T: Scalar> A2fpnParams<T> {
    pub fn init<R: Rng + ?Sized>(cfg: &PyramidConfig, rng: &mut R) -> Result<Self> {
        let c = cfg.c;
        let top = cfg.top_level();
        let extra = cfg
            .extra_level_conv
            .then(|| ConvParams::kaiming(cfg.backbone.channels[3], c, 3, 2, true, rng));
        let mut in_channels = cfg.backbone.channels.to_vec();
        if cfg.extra_level_conv {
            in_channels.push(c);
        }
        let mgc = MgcParams::init(c, 2, &in_channels, &cfg.contexts(), cfg.lambda_o, rng)?;
        let top_down = (2..top)
            .map(|_| FusionParams::init_up(&cfg.fusion_spec(true), rng))
            .collect::<Result<_>>()?;
        let seed_smooth = cfg.seed_smooth.then(|| ConvParams::kaiming(c, c, 3, 1, true, rng));
        let bottom_up = (3..=top)
            .map(|_| FusionParams::init_down(&cfg.fusion_spec(false), rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            extra,
            mgc,
            top_down,
            seed_smooth,
            bottom_up,
        })
    }

    /// Highest level produced by context distribution.
    pub fn top_level(&self) -> usize {
        self.mgc.first_level + self.mgc.distributors.len() - 1
    }
}

impl<T: Scalar> ParamSet<T> for A2fpnParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.extra.visit(&join(prefix, "extra"), f);
        self.mgc.visit(&join(prefix, "mgc"), f);
        for (i, p) in self.top_down.iter().enumerate() {
            p.visit(&join(prefix, &format!("td.l{}", i + 2)), f);
        }
        self.seed_smooth.visit(&join(prefix, "seed_smooth"), f);
        for (i, p) in self.bottom_up.iter().enumerate() {
            p.visit(&join(prefix, &format!("bu.l{}", i + 3)), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.extra.visit_mut(&join(prefix, "extra"), f);
        self.mgc.visit_mut(&join(prefix, "mgc"), f);
        for (i, p) in self.top_down.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &format!("td.l{}", i + 2)), f);
        }
        self.seed_smooth.visit_mut(&join(prefix, "seed_smooth"), f);
        for (i, p) in self.bottom_up.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &format!("bu.l{}", i + 3)), f);
        }
    }
}

#[derive(Clone, Debug)]
pub struct A2fpnTrace<T> {
    f5: Option<Tensor<T>>,
    mgc: MgcTrace<T>,
    /// Indexed like `A2fpnParams::top_down`.
    top_down: Vec<FusionTrace<T>>,
    seed_input: Tensor<T>,
    bottom_up: Vec<FusionTrace<T>>,
    top_pool: Option<PoolIndices>,
}

/// Returns `P^bu_2 … P^bu_6` from backbone levels 2–5.
pub fn forward_a2fpn_traced<T: Scalar>(
    levels: &[LevelFeature<T>],
    params: &A2fpnParams<T>,
) -> Result<(Vec<LevelFeature<T>>, A2fpnTrace<T>)> {
    ensure_dim!(
        levels.len() == 4,
        "expected backbone levels 2–5, got {} levels",
        levels.len()
    );
    let top = params.top_level();
    let mut inputs = levels.to_vec();
    let f5 = match &params.extra {
        Some(conv) => {
            inputs.push(make_extra_level(&levels[3], conv)?);
            Some(levels[3].map.clone())
        }
        None => None,
    };
    let (context, mgc) = mgc_forward_traced(&inputs, &params.mgc)?;

    // top-down: td[top] = lc[top], then fuse downwards
    let n = context.len();
    let mut td: Vec<LevelFeature<T>> = vec![context[n - 1].clone()];
    let mut td_traces = Vec::with_capacity(params.top_down.len());
    for level in (2..top).rev() {
        let idx = level - 2;
        let (out, t) = fuse_topdown_traced(td.last().expect("seeded"), &context[idx], &params.top_down[idx])?;
        td.push(out);
        td_traces.push(t);
    }
    td.reverse();
    td_traces.reverse();

    let seed_input = td[0].map.clone();
    let seed = match &params.seed_smooth {
        Some(conv) => LevelFeature {
            map: conv2d(conv, &td[0].map)?,
            ..td[0].clone()
        },
        None => td[0].clone(),
    };
    let mut bu = vec![seed];
    let mut bu_traces = Vec::with_capacity(params.bottom_up.len());
    for level in 3..=top {
        let (out, t) = fuse_bottomup_traced(bu.last().expect("seeded"), &td[level - 2], &params.bottom_up[level - 3])?;
        bu.push(out);
        bu_traces.push(t);
    }
    let mut top_pool = None;
    if top == 5 {
        let (p6, idx) = max_pool2d(&bu[3].map)?;
        bu.push(LevelFeature::new(6, p6));
        top_pool = Some(idx);
    }
    Ok((
        bu,
        A2fpnTrace {
            f5,
            mgc,
            top_down: td_traces,
            seed_input,
            bottom_up: bu_traces,
            top_pool,
        },
    ))
}

pub fn forward_a2fpn<T: Scalar>(levels: &[LevelFeature<T>], params: &A2fpnParams<T>) -> Result<Vec<LevelFeature<T>>> {
    Ok(forward_a2fpn_traced(levels, params)?.0)
}

/// Adjoints of the four backbone levels and the neck parameter gradients
/// (the orthogonality penalty is not included).
pub fn a2fpn_backward<T: Scalar>(
    params: &A2fpnParams<T>,
    trace: &A2fpnTrace<T>,
    g_outputs: &[Tensor<T>],
) -> Result<(Vec<Tensor<T>>, A2fpnParams<T>)> {
    ensure_dim!(g_outputs.len() == 5, "A2-FPN backward needs five level adjoints");
    let top = params.top_level();
    let mut grads = params.zeros_like();
    let mut g_bu: Vec<Tensor<T>> = g_outputs.to_vec();
    if let Some(idx) = &trace.top_pool {
        let g = max_pool2d_backward(idx, &g_outputs[4])?;
        g_bu[3].add_assign(&g)?;
    }
    // adjoints of the top-down outputs, indexed by level − 2
    let mut g_td: Vec<Option<Tensor<T>>> = vec![None; top - 1];
    let add = |slot: &mut Option<Tensor<T>>, g: Tensor<T>| -> Result<()> {
        match slot {
            Some(acc) => acc.add_assign(&g),
            None => {
                *slot = Some(g);
                Ok(())
            }
        }
    };
    for level in (3..=top).rev() {
        let i = level - 3;
        let fg = fuse_backward(&params.bottom_up[i], &trace.bottom_up[i], &g_bu[level - 2])?;
        grads.bottom_up[i] = fg.params;
        g_bu[level - 3].add_assign(&fg.first)?;
        add(&mut g_td[level - 2], fg.second)?;
    }
    let g_seed = match &params.seed_smooth {
        Some(conv) => {
            let (gx, gp) = conv2d_backward(conv, &trace.seed_input, &g_bu[0])?;
            grads.seed_smooth = Some(gp);
            gx
        }
        None => g_bu[0].clone(),
    };
    add(&mut g_td[0], g_seed)?;

    let mut g_lc: Vec<Tensor<T>> = Vec::with_capacity(top - 1);
    for level in 2..top {
        let i = level - 2;
        let g = g_td[i].take().expect("every top-down level feeds the bottom-up path");
        let fg = fuse_backward(&params.top_down[i], &trace.top_down[i], &g)?;
        grads.top_down[i] = fg.params;
        add(&mut g_td[i + 1], fg.first)?;
        g_lc.push(fg.second);
    }
    g_lc.push(g_td[top - 2].take().expect("top level adjoint"));

    let (mut g_in, g_mgc) = mgc_backward(&params.mgc, &trace.mgc, &g_lc)?;
    grads.mgc = g_mgc;
    if let (Some(conv), Some(f5)) = (&params.extra, &trace.f5) {
        let g6 = g_in.pop().expect("extra level adjoint");
        let (g5, gp) = conv2d_backward(conv, f5, &g6)?;
        grads.extra = Some(gp);
        g_in[3].add_assign(&g5)?;
    }
    Ok((g_in, grads))
}

/// Human-readable dataflow of the neck, one node per line.
pub fn describe_topology(cfg: &PyramidConfig) -> Vec<String> {
    let top = cfg.top_level();
    let mut lines = Vec::new();
    if cfg.extra_level_conv {
        lines.push("F6 = conv3x3/s2(F5)".to_string());
    }
    let levels: Vec<String> = (2..=top).map(|l| format!("F{l}")).collect();
    lines.push(format!("{{P^lc_2..P^lc_{top}}} = MGC({})", levels.join(", ")));
    lines.push(format!("P^td_{top} = P^lc_{top}"));
    for l in (2..top).rev() {
        lines.push(format!("P^td_{l} = topdown(P^td_{}, P^lc_{l})", l + 1));
    }
    if cfg.seed_smooth {
        lines.push("P^bu_2 = conv3x3(P^td_2)".to_string());
    } else {
        lines.push("P^bu_2 = P^td_2".to_string());
    }
    for l in 3..=top {
        lines.push(format!("P^bu_{l} = bottomup(P^bu_{}, P^td_{l})", l - 1));
    }
    if top == 5 {
        lines.push("P^bu_6 = maxpool(P^bu_5)".to_string());
    }
    lines
}

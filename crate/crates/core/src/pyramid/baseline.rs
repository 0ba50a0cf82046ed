//! Classic top-down pyramid and its path-aggregation extension.

use rand::Rng;

use crate::error::{ensure_dim, Result};
use crate::level::LevelFeature;
use crate::nn::{
    conv2d, conv2d_backward, max_pool2d, max_pool2d_backward, nearest_upsample, nearest_upsample_backward, PoolIndices,
};
use crate::params::{join, ConvParams, ParamSet};
use crate::tensor::{Scalar, Tensor};

/// Bottom-up path: strided 3×3 convs into levels 3–5 and a 3×3 smooth
/// conv after each addition.
#[derive(Clone, Debug, PartialEq)]
pub struct PathAggregationParams<T> {
    pub down: Vec<ConvParams<T>>,
    pub smooth: Vec<ConvParams<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FpnParams<T> {
    pub laterals: Vec<ConvParams<T>>,
    pub smooth: Vec<ConvParams<T>>,
    pub path: Option<PathAggregationParams<T>>,
}

impl<T: Scalar> FpnParams<T> {
    pub fn init<R: Rng + ?Sized>(in_channels: &[usize; 4], c: usize, path: bool, rng: &mut R) -> Self {
        let laterals = in_channels
            .iter()
            .map(|&ci| ConvParams::kaiming(ci, c, 1, 1, true, rng))
            .collect();
        let smooth = (0..4).map(|_| ConvParams::kaiming(c, c, 3, 1, true, rng)).collect();
        let path = path.then(|| PathAggregationParams {
            down: (0..3).map(|_| ConvParams::kaiming(c, c, 3, 2, true, rng)).collect(),
            smooth: (0..3).map(|_| ConvParams::kaiming(c, c, 3, 1, true, rng)).collect(),
        });
        Self { laterals, smooth, path }
    }
}

fn visit_list<'a, T: Scalar>(
    list: &'a [ConvParams<T>],
    prefix: &str,
    first_level: usize,
    f: &mut dyn FnMut(String, &'a Tensor<T>),
) {
    for (i, p) in list.iter().enumerate() {
        p.visit(&join(prefix, &format!("l{}", first_level + i)), f);
    }
}

fn visit_list_mut<T: Scalar>(
    list: &mut [ConvParams<T>],
    prefix: &str,
    first_level: usize,
    f: &mut dyn FnMut(String, &mut Tensor<T>),
) {
    for (i, p) in list.iter_mut().enumerate() {
        p.visit_mut(&join(prefix, &format!("l{}", first_level + i)), f);
    }
}

impl<T: Scalar> ParamSet<T> for FpnParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        visit_list(&self.laterals, &join(prefix, "lateral"), 2, f);
        visit_list(&self.smooth, &join(prefix, "fpn_smooth"), 2, f);
        if let Some(pa) = &self.path {
            visit_list(&pa.down, &join(prefix, "down"), 3, f);
            visit_list(&pa.smooth, &join(prefix, "pa_smooth"), 3, f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        visit_list_mut(&mut self.laterals, &join(prefix, "lateral"), 2, f);
        visit_list_mut(&mut self.smooth, &join(prefix, "fpn_smooth"), 2, f);
        if let Some(pa) = &mut self.path {
            visit_list_mut(&mut pa.down, &join(prefix, "down"), 3, f);
            visit_list_mut(&mut pa.smooth, &join(prefix, "pa_smooth"), 3, f);
        }
    }
}

#[derive(Clone, Debug)]
pub struct FpnTrace<T> {
    inputs: Vec<Tensor<T>>,
    merged: Vec<Tensor<T>>,
    coarse_shapes: Vec<Vec<usize>>,
    outputs: Vec<Tensor<T>>,
    path_merged: Vec<Tensor<T>>,
    top_pool: PoolIndices,
}

fn check_inputs<T: Scalar>(levels: &[LevelFeature<T>]) -> Result<()> {
    ensure_dim!(
        levels.len() == 4,
        "expected backbone levels 2–5, got {} levels",
        levels.len()
    );
    for (i, l) in levels.iter().enumerate() {
        ensure_dim!(l.level == i + 2, "missing pyramid level {} (found {})", i + 2, l.level);
    }
    Ok(())
}

pub fn forward_fpn_traced<T: Scalar>(
    levels: &[LevelFeature<T>],
    params: &FpnParams<T>,
) -> Result<(Vec<LevelFeature<T>>, FpnTrace<T>)> {
    check_inputs(levels)?;
    let lat: Vec<Tensor<T>> = levels
        .iter()
        .zip(&params.laterals)
        .map(|(l, p)| conv2d(p, &l.map))
        .collect::<Result<_>>()?;
    let mut merged = vec![Tensor::zeros(&[0]); 4];
    merged[3] = lat[3].clone();
    let mut coarse_shapes = vec![Vec::new(); 4];
    for i in (0..3).rev() {
        coarse_shapes[i] = merged[i + 1].shape().to_vec();
        merged[i] = lat[i].add(&nearest_upsample(&merged[i + 1], 2)?)?;
    }
    let mut outs: Vec<Tensor<T>> = merged
        .iter()
        .zip(&params.smooth)
        .map(|(m, p)| conv2d(p, m))
        .collect::<Result<_>>()?;
    let mut path_merged = Vec::new();
    if let Some(pa) = &params.path {
        let mut prev = outs[0].clone();
        for ((out, down), smooth) in outs[1..].iter_mut().zip(&pa.down).zip(&pa.smooth) {
            let m = out.add(&conv2d(down, &prev)?)?;
            prev = conv2d(smooth, &m)?;
            path_merged.push(m);
            *out = prev.clone();
        }
    }
    let (p6, top_pool) = max_pool2d(&outs[3])?;
    let inputs = levels.iter().map(|l| l.map.clone()).collect();
    let mut result: Vec<LevelFeature<T>> = outs
        .iter()
        .enumerate()
        .map(|(i, m)| LevelFeature::new(i + 2, m.clone()))
        .collect();
    result.push(LevelFeature::new(6, p6));
    Ok((
        result,
        FpnTrace {
            inputs,
            merged,
            coarse_shapes,
            outputs: outs,
            path_merged,
            top_pool,
        },
    ))
}

/// FPN (or PAFPN when `params.path` is set) over backbone levels 2–5;
/// returns levels 2–6.
pub fn forward_fpn<T: Scalar>(levels: &[LevelFeature<T>], params: &FpnParams<T>) -> Result<Vec<LevelFeature<T>>> {
    Ok(forward_fpn_traced(levels, params)?.0)
}

/// Same as [`forward_fpn`]; rejects parameters without the bottom-up path.
pub fn forward_pafpn<T: Scalar>(levels: &[LevelFeature<T>], params: &FpnParams<T>) -> Result<Vec<LevelFeature<T>>> {
    ensure_dim!(params.path.is_some(), "PAFPN needs bottom-up path parameters");
    forward_fpn(levels, params)
}

pub fn fpn_backward<T: Scalar>(
    params: &FpnParams<T>,
    trace: &FpnTrace<T>,
    g_outputs: &[Tensor<T>],
) -> Result<(Vec<Tensor<T>>, FpnParams<T>)> {
    ensure_dim!(g_outputs.len() == 5, "FPN backward needs five level adjoints");
    let mut grads = params.zeros_like();
    let mut g_out: Vec<Tensor<T>> = g_outputs[..4].to_vec();
    g_out[3].add_assign(&max_pool2d_backward(&trace.top_pool, &g_outputs[4])?)?;
    if let (Some(pa), Some(gpa)) = (&params.path, grads.path.as_mut()) {
        // walking down, g_out[i] is the adjoint of the final output at level i
        for i in (1..4).rev() {
            let (g_m, gs) = conv2d_backward(&pa.smooth[i - 1], &trace.path_merged[i - 1], &g_out[i])?;
            gpa.smooth[i - 1] = gs;
            let (g_prev, gd) = conv2d_backward(&pa.down[i - 1], &trace.outputs[i - 1], &g_m)?;
            gpa.down[i - 1] = gd;
            g_out[i] = g_m;
            g_out[i - 1].add_assign(&g_prev)?;
        }
    }
    let mut g_merged: Vec<Tensor<T>> = Vec::with_capacity(4);
    for (i, g) in g_out.iter().enumerate() {
        let (gm, gs) = conv2d_backward(&params.smooth[i], &trace.merged[i], g)?;
        grads.smooth[i] = gs;
        g_merged.push(gm);
    }
    for i in 0..3 {
        let g_up = nearest_upsample_backward(&g_merged[i], 2)?;
        debug_assert_eq!(g_up.shape(), &trace.coarse_shapes[i][..]);
        g_merged[i + 1].add_assign(&g_up)?;
    }
    let mut g_inputs = Vec::with_capacity(4);
    for (i, g) in g_merged.iter().enumerate() {
        let (gx, gl) = conv2d_backward(&params.laterals[i], &trace.inputs[i], g)?;
        grads.laterals[i] = gl;
        g_inputs.push(gx);
    }
    Ok((g_inputs, grads))
}

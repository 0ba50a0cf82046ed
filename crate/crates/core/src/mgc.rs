//! Multi-level global context: collect context features from every
//! backbone level by attention pooling, reason over them with GCNs whose
//! adjacency comes from self-attention, and distribute the fused bank back
//! to every level.
//!
//! All attention here goes through [`Compatibility`]: scaled cosine
//! similarity where only the keys are L2-normalized (over the feature
//! axis) and the softmax runs over the key axis.

use rand::Rng;

use crate::error::{dim_err, ensure_dim, Result};
use crate::level::LevelFeature;
use crate::params::{join, orthonormal_rows, LinearParams, ParamSet};
use crate::tensor::{
    l2_normalize, l2_normalize_backward, matmul, matmul_backward, softmax, softmax_backward, Scalar, Tensor, L2_EPS,
};

/// Attention weights of shape `n_keys × n_queries`; every column is a
/// distribution over keys.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap<T> {
    pub values: Tensor<T>,
}

/// Forward state of one scaled cosine-similarity attention.
#[derive(Clone, Debug)]
pub struct Compatibility<T> {
    queries: Tensor<T>,
    keys: Tensor<T>,
    keys_hat: Tensor<T>,
    /// `n_q × n_k`, softmax over keys
    probs: Tensor<T>,
    scale: T,
}

impl<T: Scalar> Compatibility<T> {
    /// `queries: n_q×d`, `keys: d×n_k`, scaled by `√scale_dim`.
    pub fn forward(queries: &Tensor<T>, keys: &Tensor<T>, scale_dim: usize) -> Result<Self> {
        let (_, d) = queries.dims2()?;
        let (dk, _) = keys.dims2()?;
        ensure_dim!(d == dk, "compatibility: query width {d} vs key height {dk}");
        ensure_dim!(scale_dim > 0, "compatibility: scale dimension must be positive");
        let scale = T::from_f64((scale_dim as f64).sqrt());
        let keys_hat = l2_normalize(keys, 0, L2_EPS)?;
        let logits = matmul(queries, &keys_hat)?.scale(scale);
        let probs = softmax(&logits, 1)?;
        Ok(Self {
            queries: queries.clone(),
            keys: keys.clone(),
            keys_hat,
            probs,
            scale,
        })
    }

    pub fn map(&self) -> AttentionMap<T> {
        AttentionMap {
            values: self.probs.transpose().expect("matrix"),
        }
    }

    /// Adjoints of queries and keys given the adjoint of the `n_k×n_q` map.
    pub fn backward(&self, g_map: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let g_probs = g_map.transpose()?;
        let g_logits = softmax_backward(&self.probs, &g_probs, 1)?.scale(self.scale);
        let (gq, gk_hat) = matmul_backward(&self.queries, &self.keys_hat, &g_logits)?;
        let gk = l2_normalize_backward(&self.keys, &gk_hat, 0, L2_EPS)?;
        Ok((gq, gk))
    }
}

/// Scaled cosine-similarity attention map `n_k × n_q`.
pub fn compatibility<T: Scalar>(queries: &Tensor<T>, keys: &Tensor<T>, scale_dim: usize) -> Result<AttentionMap<T>> {
    Ok(Compatibility::forward(queries, keys, scale_dim)?.map())
}

/// Context features of every level (`c × n_i`) and, once reasoned
/// together, the fused bank (`c × Σn_i`).
#[derive(Clone, Debug, PartialEq)]
pub struct ContextBank<T> {
    pub per_level: Vec<Tensor<T>>,
    pub fused: Option<Tensor<T>>,
}

impl<T: Scalar> ContextBank<T> {
    pub fn width(&self) -> usize {
        self.per_level.first().map_or(0, |g| g.shape()[0])
    }

    pub fn total_contexts(&self) -> usize {
        self.per_level.iter().map(|g| g.shape()[1]).sum()
    }
}

/// `W_1, W_2 ∈ ℝ^{c/4×c}` build queries and keys of the adjacency,
/// `W_3 ∈ ℝ^{c×c}` mixes channels.
#[derive(Clone, Debug, PartialEq)]
pub struct GcnParams<T> {
    pub query: LinearParams<T>,
    pub key: LinearParams<T>,
    pub value: LinearParams<T>,
}

impl<T: Scalar> GcnParams<T> {
    pub fn init<R: Rng + ?Sized>(c: usize, rng: &mut R) -> Self {
        Self {
            query: LinearParams::kaiming(c / 4, c, false, rng),
            key: LinearParams::kaiming(c / 4, c, false, rng),
            value: LinearParams::kaiming(c, c, false, rng),
        }
    }
}

impl<T: Scalar> ParamSet<T> for GcnParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.query.visit(&join(prefix, "w1"), f);
        self.key.visit(&join(prefix, "w2"), f);
        self.value.visit(&join(prefix, "w3"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.query.visit_mut(&join(prefix, "w1"), f);
        self.key.visit_mut(&join(prefix, "w2"), f);
        self.value.visit_mut(&join(prefix, "w3"), f);
    }
}

/// Per-level collection weights: semantic entities `W_ψ` (`n_i × c_i`),
/// embedding `W_φ` (`c × c_i`) and the single-level GCN.
#[derive(Clone, Debug, PartialEq)]
pub struct CollectorParams<T> {
    pub entities: LinearParams<T>,
    pub embed: LinearParams<T>,
    pub gcn: GcnParams<T>,
}

impl<T: Scalar> ParamSet<T> for CollectorParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.entities.visit(&join(prefix, "psi"), f);
        self.embed.visit(&join(prefix, "phi"), f);
        self.gcn.visit(&join(prefix, "gcn"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.entities.visit_mut(&join(prefix, "psi"), f);
        self.embed.visit_mut(&join(prefix, "phi"), f);
        self.gcn.visit_mut(&join(prefix, "gcn"), f);
    }
}

/// Per-level distribution weights: query projection `W_θ` and residual
/// projection `W_ξ`, both `c × c_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct DistributorParams<T> {
    pub query: LinearParams<T>,
    pub residual: LinearParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MgcParams<T> {
    /// Level index of `collectors[0]` and `distributors[0]`.
    pub first_level: usize,
    pub collectors: Vec<CollectorParams<T>>,
    pub distributors: Vec<DistributorParams<T>>,
    pub fuse_gcn: GcnParams<T>,
    /// `W_o`, shared across levels.
    pub output: LinearParams<T>,
    /// Weight of the orthogonality penalty on every `W_ψ`.
    pub lambda_o: f64,
}

impl<T: Scalar> MgcParams<T> {
    /// `in_channels` lists `c_i` for every distributed level starting at
    /// `first_level`; `contexts` lists `n_i` for the leading levels that are
    /// also collected from.
    pub fn init<R: Rng + ?Sized>(
        c: usize,
        first_level: usize,
        in_channels: &[usize],
        contexts: &[usize],
        lambda_o: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if c == 0 || !c.is_multiple_of(4) {
            return Err(dim_err!("context width {c} must be a positive multiple of 4"));
        }
        ensure_dim!(
            contexts.len() <= in_channels.len() && !contexts.is_empty(),
            "collect from {} levels but distribute to {}",
            contexts.len(),
            in_channels.len()
        );
        let collectors = contexts
            .iter()
            .zip(in_channels)
            .map(|(&n, &ci)| CollectorParams {
                entities: LinearParams {
                    weight: orthonormal_rows(n, ci, rng),
                    bias: None,
                },
                embed: LinearParams::kaiming(c, ci, false, rng),
                gcn: GcnParams::init(c, rng),
            })
            .collect();
        let distributors = in_channels
            .iter()
            .map(|&ci| DistributorParams {
                query: LinearParams::kaiming(c, ci, false, rng),
                residual: LinearParams::kaiming(c, ci, false, rng),
            })
            .collect();
        Ok(Self {
            first_level,
            collectors,
            distributors,
            fuse_gcn: GcnParams::init(c, rng),
            output: LinearParams::kaiming(c, c, false, rng),
            lambda_o,
        })
    }

    pub fn width(&self) -> usize {
        self.output.out_dim()
    }
}

impl<T: Scalar> ParamSet<T> for MgcParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (i, d) in self.distributors.iter().enumerate() {
            let lp = join(prefix, &format!("l{}", self.first_level + i));
            if let Some(c) = self.collectors.get(i) {
                c.entities.visit(&join(&lp, "psi"), f);
                c.embed.visit(&join(&lp, "phi"), f);
                c.gcn.visit(&join(&lp, "gcn"), f);
            }
            d.query.visit(&join(&lp, "theta"), f);
            d.residual.visit(&join(&lp, "xi"), f);
        }
        self.fuse_gcn.visit(&join(prefix, "fuse"), f);
        self.output.visit(&join(prefix, "out"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        let first = self.first_level;
        for (i, d) in self.distributors.iter_mut().enumerate() {
            let lp = join(prefix, &format!("l{}", first + i));
            if let Some(c) = self.collectors.get_mut(i) {
                c.entities.visit_mut(&join(&lp, "psi"), f);
                c.embed.visit_mut(&join(&lp, "phi"), f);
                c.gcn.visit_mut(&join(&lp, "gcn"), f);
            }
            d.query.visit_mut(&join(&lp, "theta"), f);
            d.residual.visit_mut(&join(&lp, "xi"), f);
        }
        self.fuse_gcn.visit_mut(&join(prefix, "fuse"), f);
        self.output.visit_mut(&join(prefix, "out"), f);
    }
}

fn flatten_map<T: Scalar>(f: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = f.dims3()?;
    f.reshape(&[c, h * w])
}

/// Forward state of attention pooling over one level.
#[derive(Clone, Debug)]
pub struct CollectTrace<T> {
    input: Tensor<T>,
    attn: Compatibility<T>,
    embedded: Tensor<T>,
    map: Tensor<T>,
}

pub(crate) fn collect_forward<T: Scalar>(
    f: &Tensor<T>,
    p: &CollectorParams<T>,
) -> Result<(Tensor<T>, CollectTrace<T>)> {
    let x = flatten_map(f)?;
    let ci = x.shape()[0];
    ensure_dim!(
        p.entities.in_dim() == ci && p.embed.in_dim() == ci,
        "collector expects {} channels, got {ci}",
        p.entities.in_dim()
    );
    let attn = Compatibility::forward(&p.entities.weight, &x, ci)?;
    let map = attn.map().values; // hw × n_i
    let embedded = p.embed.forward(&x)?;
    let g = matmul(&embedded, &map)?;
    Ok((
        g,
        CollectTrace {
            input: x,
            attn,
            embedded,
            map,
        },
    ))
}

/// Returns the adjoint of the (flattened) input and the collector
/// gradients; the GCN part of the returned gradients is zero.
pub(crate) fn collect_backward<T: Scalar>(
    p: &CollectorParams<T>,
    t: &CollectTrace<T>,
    g_out: &Tensor<T>,
) -> Result<(Tensor<T>, CollectorParams<T>)> {
    let (g_emb, g_map) = matmul_backward(&t.embedded, &t.map, g_out)?;
    let (g_entities, g_keys) = t.attn.backward(&g_map)?;
    let (mut gx, g_embed) = p.embed.backward(&t.input, &g_emb)?;
    gx.add_assign(&g_keys)?;
    Ok((
        gx,
        CollectorParams {
            entities: LinearParams {
                weight: g_entities,
                bias: None,
            },
            embed: g_embed,
            gcn: p.gcn.zeros_like(),
        },
    ))
}

/// Attention pooling of one level into `n_i` context features of width `c`.
pub fn collect_context<T: Scalar>(f: &LevelFeature<T>, p: &CollectorParams<T>) -> Result<Tensor<T>> {
    Ok(collect_forward(&f.map, p)?.0)
}

#[derive(Clone, Debug)]
pub struct GcnTrace<T> {
    input: Tensor<T>,
    attn: Compatibility<T>,
    adjacency: Tensor<T>,
    values: Tensor<T>,
}

pub(crate) fn gcn_forward<T: Scalar>(g: &Tensor<T>, p: &GcnParams<T>) -> Result<(Tensor<T>, GcnTrace<T>)> {
    let (c, _) = g.dims2()?;
    ensure_dim!(c % 4 == 0, "gcn width {c} not divisible by 4");
    ensure_dim!(p.value.in_dim() == c, "gcn expects width {}, got {c}", p.value.in_dim());
    let q_proj = p.query.forward(g)?;
    let k_proj = p.key.forward(g)?;
    let attn = Compatibility::forward(&q_proj.transpose()?, &k_proj, c / 4)?;
    let adjacency = attn.map().values;
    let values = p.value.forward(g)?;
    let out = matmul(&values, &adjacency)?.add(g)?;
    Ok((
        out,
        GcnTrace {
            input: g.clone(),
            attn,
            adjacency,
            values,
        },
    ))
}

pub(crate) fn gcn_backward<T: Scalar>(
    p: &GcnParams<T>,
    t: &GcnTrace<T>,
    g_out: &Tensor<T>,
) -> Result<(Tensor<T>, GcnParams<T>)> {
    let (g_values, g_adj) = matmul_backward(&t.values, &t.adjacency, g_out)?;
    let (g_qt, g_k) = t.attn.backward(&g_adj)?;
    let (gx_q, g_query) = p.query.backward(&t.input, &g_qt.transpose()?)?;
    let (gx_k, g_key) = p.key.backward(&t.input, &g_k)?;
    let (gx_v, g_value) = p.value.backward(&t.input, &g_values)?;
    let mut gx = g_out.clone();
    gx.add_assign(&gx_q)?;
    gx.add_assign(&gx_k)?;
    gx.add_assign(&gx_v)?;
    Ok((
        gx,
        GcnParams {
            query: g_query,
            key: g_key,
            value: g_value,
        },
    ))
}

/// Residual graph convolution whose adjacency is self-attention over the
/// context features.
pub fn gcn_layer<T: Scalar>(g: &Tensor<T>, p: &GcnParams<T>) -> Result<Tensor<T>> {
    Ok(gcn_forward(g, p)?.0)
}

pub(crate) fn concat_columns<T: Scalar>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    let c = parts.first().ok_or_else(|| dim_err!("no context banks"))?.shape()[0];
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (pc, n) = p.dims2()?;
        ensure_dim!(pc == c, "context banks disagree on width: {pc} vs {c}");
        widths.push(n);
    }
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(c * total);
    for r in 0..c {
        for (p, &n) in parts.iter().zip(&widths) {
            out.extend_from_slice(&p.data()[r * n..(r + 1) * n]);
        }
    }
    Tensor::new(&[c, total], out)
}

pub(crate) fn split_columns<T: Scalar>(t: &Tensor<T>, widths: &[usize]) -> Result<Vec<Tensor<T>>> {
    let (c, total) = t.dims2()?;
    ensure_dim!(
        widths.iter().sum::<usize>() == total,
        "column split does not cover {total}"
    );
    let mut offset = 0;
    widths
        .iter()
        .map(|&n| {
            let mut part = Vec::with_capacity(c * n);
            for r in 0..c {
                part.extend_from_slice(&t.data()[r * total + offset..r * total + offset + n]);
            }
            offset += n;
            Tensor::new(&[c, n], part)
        })
        .collect()
}

/// Column-concatenates already reasoned per-level banks and runs the
/// shared GCN over all of them; the result is stored as the fused bank.
pub fn reason_multilevel<T: Scalar>(banks: &ContextBank<T>, p: &GcnParams<T>) -> Result<ContextBank<T>> {
    let joined = concat_columns(&banks.per_level)?;
    let fused = gcn_layer(&joined, p)?;
    Ok(ContextBank {
        per_level: banks.per_level.clone(),
        fused: Some(fused),
    })
}

#[derive(Clone, Debug)]
pub struct DistributeTrace<T> {
    input: Tensor<T>,
    bank: Tensor<T>,
    attn: Compatibility<T>,
    map: Tensor<T>,
    values: Tensor<T>,
}

pub(crate) fn distribute_forward<T: Scalar>(
    f: &Tensor<T>,
    bank: &Tensor<T>,
    p: &DistributorParams<T>,
    output: &LinearParams<T>,
) -> Result<(Tensor<T>, DistributeTrace<T>)> {
    let (_, h, w) = f.dims3()?;
    let x = flatten_map(f)?;
    let (c, _) = bank.dims2()?;
    ensure_dim!(
        p.query.in_dim() == x.shape()[0],
        "distributor expects {} channels, got {}",
        p.query.in_dim(),
        x.shape()[0]
    );
    let queries = p.query.forward(&x)?.transpose()?; // hw × c
    let attn = Compatibility::forward(&queries, bank, c)?;
    let map = attn.map().values; // n × hw
    let values = output.forward(bank)?;
    let out = matmul(&values, &map)?.add(&p.residual.forward(&x)?)?;
    Ok((
        out.into_reshape(&[c, h, w])?,
        DistributeTrace {
            input: x,
            bank: bank.clone(),
            attn,
            map,
            values,
        },
    ))
}

/// Input adjoint (c_i×hw), bank adjoint, distributor grads, W_o grads.
type DistributeGrads<T> = (Tensor<T>, Tensor<T>, DistributorParams<T>, LinearParams<T>);

pub(crate) fn distribute_backward<T: Scalar>(
    p: &DistributorParams<T>,
    output: &LinearParams<T>,
    t: &DistributeTrace<T>,
    g_out: &Tensor<T>,
) -> Result<DistributeGrads<T>> {
    let g = g_out.reshape(&[g_out.shape()[0], t.map.shape()[1]])?;
    let (g_values, g_map) = matmul_backward(&t.values, &t.map, &g)?;
    let (g_queries, g_keys) = t.attn.backward(&g_map)?;
    let (mut g_bank, g_output) = output.backward(&t.bank, &g_values)?;
    g_bank.add_assign(&g_keys)?;
    let (mut gx, g_query) = p.query.backward(&t.input, &g_queries.transpose()?)?;
    let (gx_res, g_residual) = p.residual.backward(&t.input, &g)?;
    gx.add_assign(&gx_res)?;
    Ok((
        gx,
        g_bank,
        DistributorParams {
            query: g_query,
            residual: g_residual,
        },
        g_output,
    ))
}

/// Attends from every location of `f` into the fused bank and adds the
/// residual projection of `f`.
pub fn distribute_context<T: Scalar>(
    f: &LevelFeature<T>,
    fused: &Tensor<T>,
    p: &DistributorParams<T>,
    output: &LinearParams<T>,
) -> Result<LevelFeature<T>> {
    let (map, _) = distribute_forward(&f.map, fused, p, output)?;
    Ok(LevelFeature {
        level: f.level,
        stride: f.stride,
        map,
    })
}

/// `λ_o · Σ_i ‖W_ψ,i W_ψ,iᵀ − I‖²_F` and its gradient w.r.t. every `W_ψ,i`.
pub fn orthogonal_reg_loss<T: Scalar>(params: &MgcParams<T>) -> f64 {
    params
        .collectors
        .iter()
        .map(|c| orthogonal_penalty(&c.entities.weight).0)
        .sum::<f64>()
        * params.lambda_o
}

/// Gradient store with only the `W_ψ` entries populated.
pub fn orthogonal_reg_grad<T: Scalar>(params: &MgcParams<T>) -> Result<MgcParams<T>> {
    let mut g = params.zeros_like();
    let lam = T::from_f64(params.lambda_o);
    for (gc, c) in g.collectors.iter_mut().zip(&params.collectors) {
        gc.entities.weight = orthogonal_penalty(&c.entities.weight).1.scale(lam);
    }
    Ok(g)
}

/// `(‖W Wᵀ − I‖²_F, 4 (W Wᵀ − I) W)`.
fn orthogonal_penalty<T: Scalar>(w: &Tensor<T>) -> (f64, Tensor<T>) {
    let gram = matmul(w, &w.transpose().expect("matrix")).expect("square gram");
    let resid = gram.sub(&Tensor::eye(w.shape()[0])).expect("same shape");
    let value = resid.dot(&resid).expect("same shape");
    let grad = matmul(&resid, w).expect("conformant").scale(T::from_f64(4.0));
    (value, grad)
}

/// Everything the MGC backward pass needs.
#[derive(Clone, Debug)]
pub struct MgcTrace<T> {
    collects: Vec<CollectTrace<T>>,
    level_gcns: Vec<GcnTrace<T>>,
    widths: Vec<usize>,
    fuse: GcnTrace<T>,
    distributes: Vec<DistributeTrace<T>>,
    shapes: Vec<Vec<usize>>,
    pub bank: ContextBank<T>,
}

fn check_levels<T: Scalar>(levels: &[LevelFeature<T>], params: &MgcParams<T>) -> Result<()> {
    ensure_dim!(
        levels.len() == params.distributors.len(),
        "MGC configured for {} levels, got {}",
        params.distributors.len(),
        levels.len()
    );
    for (i, l) in levels.iter().enumerate() {
        let want = params.first_level + i;
        if l.level != want {
            return Err(dim_err!("missing pyramid level {want} (found level {})", l.level));
        }
    }
    Ok(())
}

/// Collect → per-level GCN → multi-level GCN → distribute, with the state
/// needed for [`mgc_backward`].
pub fn mgc_forward_traced<T: Scalar>(
    levels: &[LevelFeature<T>],
    params: &MgcParams<T>,
) -> Result<(Vec<LevelFeature<T>>, MgcTrace<T>)> {
    check_levels(levels, params)?;
    let mut collects = Vec::new();
    let mut level_gcns = Vec::new();
    let mut reasoned = Vec::new();
    for (l, cp) in levels.iter().zip(&params.collectors) {
        let (g, ct) = collect_forward(&l.map, cp)?;
        let (gr, gt) = gcn_forward(&g, &cp.gcn)?;
        collects.push(ct);
        level_gcns.push(gt);
        reasoned.push(gr);
    }
    let widths: Vec<usize> = reasoned.iter().map(|g| g.shape()[1]).collect();
    let joined = concat_columns(&reasoned)?;
    let (fused, fuse) = gcn_forward(&joined, &params.fuse_gcn)?;
    let mut outputs = Vec::new();
    let mut distributes = Vec::new();
    for (l, dp) in levels.iter().zip(&params.distributors) {
        let (map, dt) = distribute_forward(&l.map, &fused, dp, &params.output)?;
        outputs.push(LevelFeature {
            level: l.level,
            stride: l.stride,
            map,
        });
        distributes.push(dt);
    }
    Ok((
        outputs,
        MgcTrace {
            collects,
            level_gcns,
            widths,
            fuse,
            distributes,
            shapes: levels.iter().map(|l| l.map.shape().to_vec()).collect(),
            bank: ContextBank {
                per_level: reasoned,
                fused: Some(fused),
            },
        },
    ))
}

/// Context-enriched features for every configured level.
pub fn mgc_forward<T: Scalar>(levels: &[LevelFeature<T>], params: &MgcParams<T>) -> Result<Vec<LevelFeature<T>>> {
    Ok(mgc_forward_traced(levels, params)?.0)
}

/// Input adjoints per level and parameter gradients (without the
/// orthogonality term, see [`orthogonal_reg_grad`]).
pub fn mgc_backward<T: Scalar>(
    params: &MgcParams<T>,
    trace: &MgcTrace<T>,
    g_outputs: &[Tensor<T>],
) -> Result<(Vec<Tensor<T>>, MgcParams<T>)> {
    ensure_dim!(
        g_outputs.len() == trace.distributes.len(),
        "one adjoint per MGC output expected"
    );
    let mut grads = params.zeros_like();
    let mut g_inputs = Vec::with_capacity(g_outputs.len());
    let mut g_fused: Option<Tensor<T>> = None;
    for (i, (dt, g)) in trace.distributes.iter().zip(g_outputs).enumerate() {
        let (gx, g_bank, g_dist, g_out) = distribute_backward(&params.distributors[i], &params.output, dt, g)?;
        grads.distributors[i] = g_dist;
        grads.output.axpy(T::one(), &g_out);
        match &mut g_fused {
            Some(acc) => acc.add_assign(&g_bank)?,
            None => g_fused = Some(g_bank),
        }
        g_inputs.push(gx);
    }
    let g_fused = g_fused.ok_or_else(|| dim_err!("MGC trace has no levels"))?;
    let (g_joined, g_fuse) = gcn_backward(&params.fuse_gcn, &trace.fuse, &g_fused)?;
    grads.fuse_gcn = g_fuse;
    let g_reasoned = split_columns(&g_joined, &trace.widths)?;
    for (i, g) in g_reasoned.iter().enumerate() {
        let (g_collected, g_gcn) = gcn_backward(&params.collectors[i].gcn, &trace.level_gcns[i], g)?;
        let (gx, mut g_col) = collect_backward(&params.collectors[i], &trace.collects[i], &g_collected)?;
        g_col.gcn = g_gcn;
        grads.collectors[i] = g_col;
        g_inputs[i].add_assign(&gx)?;
    }
    let g_inputs = g_inputs
        .into_iter()
        .zip(&trace.shapes)
        .map(|(g, s)| g.into_reshape(s))
        .collect::<Result<Vec<_>>>()?;
    Ok((g_inputs, grads))
}

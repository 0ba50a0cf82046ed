//! Closed-form parameter and FLOP accounting of the pyramid necks.
//!
//! Conventions: one multiply-accumulate is one FLOP, so a convolution
//! costs `out·in·k²·h_out·w_out`; bias adds are not counted. Elementwise
//! work (additions, scaling, activations, normalization, pooling
//! comparisons) costs one FLOP per element and softmax three. Bilinear
//! upsampling costs four per output element; nearest upsampling, pixel
//! shuffle and concatenation are free. Backbone and heads are excluded.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::pyramid::{Arch, PyramidConfig};

/// Neck growth of A²-FPN over PAFPN reported for Mask R-CNN at 1280×832.
pub const REFERENCE_A2FPN_PARAMS_DELTA: f64 = 9.77e6;
pub const REFERENCE_A2FPN_FLOPS_DELTA: f64 = 66.34e9;
/// Relative band within which the informational deltas are called close.
pub const REFERENCE_TOLERANCE: f64 = 0.20;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ComplexityLine {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ComplexityReport {
    pub arch: String,
    /// `(height, width)` of the input image.
    pub image_size: (usize, usize),
    pub lines: Vec<ComplexityLine>,
    pub total_params: u64,
    pub total_flops: u64,
}

impl ComplexityReport {
    fn new(arch: &str, image_size: (usize, usize)) -> Self {
        Self {
            arch: arch.to_string(),
            image_size,
            ..Self::default()
        }
    }

    fn push(&mut self, name: impl Into<String>, params: u64, flops: u64) {
        self.total_params += params;
        self.total_flops += flops;
        self.lines.push(ComplexityLine {
            name: name.into(),
            params,
            flops,
        });
    }

    pub fn line(&self, name: &str) -> Option<&ComplexityLine> {
        self.lines.iter().find(|l| l.name == name)
    }

    /// Breakdown as an aligned text table.
    pub fn breakdown_table(&self) -> String {
        let width = self.lines.iter().map(|l| l.name.len()).max().unwrap_or(4).max(5);
        let mut out = format!("{:<width$}  {:>14}  {:>18}\n", "layer", "params", "flops");
        for l in &self.lines {
            let _ = writeln!(out, "{:<width$}  {:>14}  {:>18}", l.name, l.params, l.flops);
        }
        let _ = writeln!(
            out,
            "{:<width$}  {:>14}  {:>18}",
            "total", self.total_params, self.total_flops
        );
        out
    }
}

/// One-row-per-report summary with columns Method, Image Size, #FLOPs,
/// #Params.
pub fn summary_table(reports: &[ComplexityReport]) -> String {
    let mut out = format!(
        "{:<12}  {:>10}  {:>10}  {:>9}\n",
        "Method", "Image Size", "#FLOPs", "#Params"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<12}  {:>10}  {:>9.2}G  {:>8.2}M",
            r.arch,
            format!("{}×{}", r.image_size.1, r.image_size.0),
            r.total_flops as f64 / 1e9,
            r.total_params as f64 / 1e6
        );
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct DeltaLine {
    pub name: String,
    pub params: i64,
    pub flops: i64,
}

/// `a − b` per line and in total.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct DeltaReport {
    pub a: String,
    pub b: String,
    pub image_size: (usize, usize),
    pub lines: Vec<DeltaLine>,
    pub params: i64,
    pub flops: i64,
}

impl DeltaReport {
    pub fn table(&self) -> String {
        let width = self.lines.iter().map(|l| l.name.len()).max().unwrap_or(4).max(5);
        let mut out = format!(
            "{} − {}\n{:<width$}  {:>14}  {:>18}\n",
            self.a, self.b, "layer", "Δparams", "Δflops"
        );
        for l in self.lines.iter().filter(|l| l.params != 0 || l.flops != 0) {
            let _ = writeln!(out, "{:<width$}  {:>14}  {:>18}", l.name, l.params, l.flops);
        }
        let _ = writeln!(out, "{:<width$}  {:>14}  {:>18}", "total", self.params, self.flops);
        out
    }
}

pub fn diff_report(a: &ComplexityReport, b: &ComplexityReport) -> Result<DeltaReport> {
    if a.image_size != b.image_size {
        return Err(Error::Config(format!(
            "cannot diff reports at {:?} and {:?}",
            a.image_size, b.image_size
        )));
    }
    let mut seen = BTreeSet::new();
    let names: Vec<&str> = a
        .lines
        .iter()
        .chain(&b.lines)
        .map(|l| l.name.as_str())
        .filter(|n| seen.insert(*n))
        .collect();
    let get = |r: &ComplexityReport, n: &str| r.line(n).map_or((0, 0), |l| (l.params as i64, l.flops as i64));
    let lines = names
        .into_iter()
        .map(|n| {
            let ((pa, fa), (pb, fb)) = (get(a, n), get(b, n));
            DeltaLine {
                name: n.to_string(),
                params: pa - pb,
                flops: fa - fb,
            }
        })
        .collect();
    Ok(DeltaReport {
        a: a.arch.clone(),
        b: b.arch.clone(),
        image_size: a.image_size,
        lines,
        params: a.total_params as i64 - b.total_params as i64,
        flops: a.total_flops as i64 - b.total_flops as i64,
    })
}

pub fn conv_params(cin: usize, cout: usize, k: usize, bias: bool) -> u64 {
    (cout * cin * k * k + if bias { cout } else { 0 }) as u64
}

pub fn conv_flops(cin: usize, cout: usize, k: usize, h_out: usize, w_out: usize) -> u64 {
    (cout * cin * k * k * h_out * w_out) as u64
}

/// Parameter and FLOP totals of one neck.
pub fn complexity(cfg: &PyramidConfig) -> Result<ComplexityReport> {
    cfg.validate()?;
    let (h, w) = cfg.image_size;
    if h % 64 != 0 || w % 64 != 0 || h == 0 || w == 0 {
        return Err(Error::Config(format!("image {h}×{w} is not divisible by 64")));
    }
    let grid = Grid { h, w };
    let mut r = ComplexityReport::new(cfg.arch.name(), cfg.image_size);
    match cfg.arch {
        Arch::Fpn => fpn(cfg, grid, false, &mut r),
        Arch::Pafpn => fpn(cfg, grid, true, &mut r),
        Arch::A2fpn | Arch::A2fpnLite => a2fpn(cfg, grid, &mut r),
    }
    Ok(r)
}

pub fn count_params(cfg: &PyramidConfig) -> Result<u64> {
    Ok(complexity(cfg)?.total_params)
}

pub fn count_flops(cfg: &PyramidConfig) -> Result<u64> {
    Ok(complexity(cfg)?.total_flops)
}

#[derive(Clone, Copy)]
struct Grid {
    h: usize,
    w: usize,
}

impl Grid {
    /// Spatial positions of pyramid level `level` (stride `2^level`).
    fn area(self, level: usize) -> usize {
        (self.h >> level) * (self.w >> level)
    }
}

fn fpn(cfg: &PyramidConfig, g: Grid, path: bool, r: &mut ComplexityReport) {
    let c = cfg.c;
    for (i, &ci) in cfg.backbone.channels.iter().enumerate() {
        let l = i + 2;
        r.push(
            format!("lateral.l{l}"),
            conv_params(ci, c, 1, true),
            conv_flops(ci, c, 1, 1, g.area(l)),
        );
    }
    for l in 2..5 {
        r.push(format!("topdown_add.l{l}"), 0, (c * g.area(l)) as u64);
    }
    for l in 2..6 {
        r.push(
            format!("fpn_smooth.l{l}"),
            conv_params(c, c, 3, true),
            conv_flops(c, c, 3, 1, g.area(l)),
        );
    }
    if path {
        for l in 3..6 {
            let a = g.area(l);
            r.push(
                format!("down.l{l}"),
                conv_params(c, c, 3, true),
                conv_flops(c, c, 3, 1, a),
            );
            r.push(format!("pa_add.l{l}"), 0, (c * a) as u64);
            r.push(
                format!("pa_smooth.l{l}"),
                conv_params(c, c, 3, true),
                conv_flops(c, c, 3, 1, a),
            );
        }
    }
    r.push("p6_pool", 0, (c * g.area(5)) as u64);
}

/// Scaled cosine attention of `nq` queries against `nk` keys of width `d`:
/// key normalization, logits, scaling and softmax.
fn compat_flops(nq: usize, d: usize, nk: usize) -> u64 {
    (d * nk + nq * d * nk + nq * nk + 3 * nq * nk) as u64
}

fn gcn_params(c: usize) -> u64 {
    (2 * (c / 4) * c + c * c) as u64
}

/// GCN over `n` nodes of width `c`.
fn gcn_flops(c: usize, n: usize) -> u64 {
    let q = c / 4;
    (2 * q * c * n + c * c * n) as u64 + compat_flops(n, q, n) + (c * n * n + c * n) as u64
}

fn a2fpn(cfg: &PyramidConfig, g: Grid, r: &mut ComplexityReport) {
    let c = cfg.c;
    let top = cfg.top_level();
    let mut widths = cfg.backbone.channels.to_vec();
    if cfg.extra_level_conv {
        let c5 = cfg.backbone.channels[3];
        r.push("extra", conv_params(c5, c, 3, true), conv_flops(c5, c, 3, 1, g.area(6)));
        widths.push(c);
    }

    let contexts = cfg.contexts();
    for (i, (&n, &ci)) in contexts.iter().zip(&widths).enumerate() {
        let l = i + 2;
        let hw = g.area(l);
        let params = (n * ci + c * ci) as u64;
        let flops = compat_flops(n, ci, hw) + (c * ci * hw + c * hw * n) as u64;
        r.push(format!("mgc.l{l}.collect"), params, flops);
        r.push(format!("mgc.l{l}.gcn"), gcn_params(c), gcn_flops(c, n));
    }
    let total_n: usize = contexts.iter().sum();
    r.push("mgc.fuse", gcn_params(c), gcn_flops(c, total_n));
    for (i, &ci) in widths.iter().enumerate() {
        let l = i + 2;
        let hw = g.area(l);
        let flops = (c * ci * hw) as u64          // queries
            + compat_flops(hw, c, total_n)
            + (c * c * total_n + c * total_n * hw) as u64  // W_o·bank, then weighted sum
            + (c * ci * hw + c * hw) as u64; // residual projection and add
        r.push(format!("mgc.l{l}.distribute"), (2 * c * ci) as u64, flops);
    }
    r.push("mgc.out", (c * c) as u64, 0);

    for l in 2..top {
        let (p, f) = fusion_cost(cfg, true, g.area(l + 1), g.area(l));
        r.push(format!("td.l{l}"), p, f);
    }
    if cfg.seed_smooth {
        r.push(
            "seed_smooth",
            conv_params(c, c, 3, true),
            conv_flops(c, c, 3, 1, g.area(2)),
        );
    }
    for l in 3..=top {
        let (p, f) = fusion_cost(cfg, false, g.area(l - 1), g.area(l));
        r.push(format!("bu.l{l}"), p, f);
    }
    if top == 5 {
        r.push("p6_pool", 0, (c * g.area(5)) as u64);
    }
}

/// One fusion site. For top-down, `src_area` is the coarse grid and
/// `dst_area` the lateral grid; for bottom-up, `src_area` is the finer
/// grid being downsampled onto `dst_area`.
fn fusion_cost(cfg: &PyramidConfig, up: bool, src_area: usize, dst_area: usize) -> (u64, u64) {
    let spec = cfg.fusion_spec(up);
    let c = spec.channels;
    let (cm, ken) = (spec.compressed, spec.encoder_kernel);
    let kk = spec.kernel_size * spec.kernel_size;
    let guide = if spec.guided { 2 * c } else { c };
    let pred_out = if up { 4 * kk } else { kk };
    // Guides and gates live on the source grid.
    let (guide_area, pred_area) = if up { (src_area, src_area) } else { (src_area, dst_area) };

    let mut params =
        conv_params(guide, cm, 1, true) + conv_params(cm, cm, 3, true) + conv_params(cm, pred_out, ken, true);
    let mut flops = 0u64;
    flops += if up {
        (c * dst_area) as u64 // max-pool the lateral map
    } else {
        (4 * c * src_area) as u64 // bilinear upsample of the td map
    };
    flops += conv_flops(guide, cm, 1, 1, guide_area)
        + conv_flops(cm, cm, 3, 1, guide_area)
        + (cm * guide_area) as u64
        + conv_flops(cm, pred_out, ken, 1, pred_area)
        + (3 * kk * dst_area) as u64;
    flops += (c * dst_area * kk) as u64;
    if spec.gated {
        let half = c / 2;
        params += (2 * c + half * 2 * c + 2 * half + 2 * c * half) as u64;
        flops += (2 * c * guide_area + 3 * guide_area + 2 * c * guide_area) as u64
            + (half * 2 * c + 2 * half + 2 * c * half + 2 * c) as u64;
        flops += (2 * c * dst_area) as u64;
    }
    flops += (c * dst_area) as u64;
    if spec.smooth {
        params += conv_params(c, c, 3, true);
        flops += conv_flops(c, c, 3, 1, dst_area);
    }
    (params, flops)
}

/// A²-FPN growth over PAFPN next to the reference figures.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReferenceDelta {
    pub params_delta: i64,
    pub flops_delta: i64,
    pub reference_params_delta: f64,
    pub reference_flops_delta: f64,
    /// `ours / reference`.
    pub params_ratio: f64,
    pub flops_ratio: f64,
    pub within_tolerance: bool,
    /// Per-line contributions, largest first.
    pub itemized: Vec<DeltaLine>,
}

/// Compares `a2fpn − pafpn` against the reference growth. Informational:
/// the reference layer inventory is not fully specified.
pub fn reference_delta(a2fpn: &ComplexityReport, pafpn: &ComplexityReport) -> Result<ReferenceDelta> {
    let d = diff_report(a2fpn, pafpn)?;
    let params_ratio = d.params as f64 / REFERENCE_A2FPN_PARAMS_DELTA;
    let flops_ratio = d.flops as f64 / REFERENCE_A2FPN_FLOPS_DELTA;
    let mut itemized: Vec<DeltaLine> = d.lines.into_iter().filter(|l| l.params != 0 || l.flops != 0).collect();
    itemized.sort_by_key(|l| std::cmp::Reverse(l.flops.abs()));
    Ok(ReferenceDelta {
        params_delta: d.params,
        flops_delta: d.flops,
        reference_params_delta: REFERENCE_A2FPN_PARAMS_DELTA,
        reference_flops_delta: REFERENCE_A2FPN_FLOPS_DELTA,
        params_ratio,
        flops_ratio,
        within_tolerance: (params_ratio - 1.0).abs() <= REFERENCE_TOLERANCE
            && (flops_ratio - 1.0).abs() <= REFERENCE_TOLERANCE,
        itemized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid::{BackboneSpec, FpnParams, PyramidModel};
    use crate::ParamSet;

    fn cfg(arch: Arch) -> PyramidConfig {
        PyramidConfig {
            backbone: BackboneSpec::resnet(),
            image_size: (832, 1280),
            ..PyramidConfig::preset(arch)
        }
    }

    #[test]
    fn hand_counts() {
        assert_eq!(conv_params(256, 256, 1, true), 65_792);
        assert_eq!(conv_flops(256, 256, 3, 160, 104), 9_814_671_360);
        assert_eq!(ComplexityReport::default().total_params, 0);
    }

    #[test]
    fn pafpn_minus_fpn() {
        let d = diff_report(
            &complexity(&cfg(Arch::Pafpn)).unwrap(),
            &complexity(&cfg(Arch::Fpn)).unwrap(),
        )
        .unwrap();
        assert_eq!(d.params, 3_540_480);
        assert!((d.flops as f64 / 25.77e9 - 1.0).abs() < 1e-3, "{}", d.flops);
    }

    #[test]
    fn diff_is_antisymmetric() {
        let a = complexity(&cfg(Arch::A2fpn)).unwrap();
        let b = complexity(&cfg(Arch::Fpn)).unwrap();
        let ab = diff_report(&a, &b).unwrap();
        let ba = diff_report(&b, &a).unwrap();
        assert_eq!(ab.params, -ba.params);
        assert_eq!(ab.flops, -ba.flops);
        let same = diff_report(&a, &a).unwrap();
        assert!(same.lines.iter().all(|l| l.params == 0 && l.flops == 0));
    }

    #[test]
    fn totals_are_line_sums() {
        for arch in [Arch::Fpn, Arch::Pafpn, Arch::A2fpn, Arch::A2fpnLite] {
            let r = complexity(&cfg(arch)).unwrap();
            assert_eq!(r.total_params, r.lines.iter().map(|l| l.params).sum::<u64>());
            assert_eq!(r.total_flops, r.lines.iter().map(|l| l.flops).sum::<u64>());
        }
    }

    #[test]
    fn params_match_instantiated_necks() {
        for arch in [Arch::Fpn, Arch::Pafpn, Arch::A2fpn, Arch::A2fpnLite] {
            let mut c = PyramidConfig::toy(arch);
            c.image_size = (64, 64);
            let model = PyramidModel::<f32>::init(&c).unwrap();
            assert_eq!(count_params(&c).unwrap(), model.neck.num_elements() as u64, "{arch}");
        }
        let fpn = FpnParams::<f32>::init(&[256, 512, 1024, 2048], 256, true, &mut rand::rng());
        assert_eq!(count_params(&cfg(Arch::Pafpn)).unwrap(), fpn.num_elements() as u64);
    }

    #[test]
    fn ablation_flags_shrink_counts() {
        let full = complexity(&cfg(Arch::A2fpn)).unwrap();
        let mut plain = cfg(Arch::A2fpn);
        plain.use_channel_gates = false;
        plain.use_concat_guidance = false;
        let plain = complexity(&plain).unwrap();
        assert!(plain.total_params < full.total_params);
        assert!(plain.total_flops < full.total_flops);
    }

    #[test]
    fn indivisible_image_rejected() {
        let mut c = cfg(Arch::Fpn);
        c.image_size = (100, 128);
        assert!(complexity(&c).is_err());
    }
}

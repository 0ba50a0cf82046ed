//! Loop-level reference implementations compared against the vectorized
//! kernels on randomly drawn shapes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::fusion::{reassemble_down, reassemble_up, ReassemblyKernels};
use crate::level::LevelFeature;
use crate::mgc::{collect_context, compatibility, CollectorParams, GcnParams};
use crate::nn::{bilinear_upsample, conv2d, pixel_shuffle};
use crate::params::{ConvParams, LinearParams};
use crate::tensor::{softmax, Tensor};

/// Bound on `|fast − naive| / max(1, |naive|)`.
pub const ORACLE_TOL: f64 = 1e-12;
pub const DEFAULT_CASES: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleReport {
    pub op: String,
    pub cases: usize,
    pub max_err: f64,
    pub tol: f64,
    pub passed: bool,
}

type Case = fn(&mut ChaCha8Rng) -> Result<(Tensor<f64>, Vec<f64>)>;

const ORACLES: &[(&str, Case)] = &[
    ("conv2d", conv_case),
    ("attention_pooling", pooling_case),
    ("compatibility", compatibility_case),
    ("reassemble_up", |r| reassembly_case(r, true)),
    ("reassemble_down", |r| reassembly_case(r, false)),
    ("pixel_shuffle", shuffle_case),
    ("bilinear_upsample", bilinear_case),
];

pub fn oracle_names() -> Vec<&'static str> {
    ORACLES.iter().map(|(n, _)| *n).collect()
}

/// Runs every oracle on `cases` random shapes each.
pub fn run_oracles(seed: u64, cases: usize) -> Result<Vec<OracleReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ORACLES
        .iter()
        .map(|(name, case)| {
            let mut max_err = 0.0f64;
            for _ in 0..cases {
                let (fast, naive) = case(&mut rng)?;
                crate::error::ensure_dim!(fast.len() == naive.len(), "{name}: output length differs");
                for (a, b) in fast.data().iter().zip(&naive) {
                    max_err = max_err.max((a - b).abs() / b.abs().max(1.0));
                }
            }
            Ok(OracleReport {
                op: name.to_string(),
                cases,
                max_err,
                tol: ORACLE_TOL,
                passed: max_err <= ORACLE_TOL,
            })
        })
        .collect()
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

fn conv_case(rng: &mut ChaCha8Rng) -> Result<(Tensor<f64>, Vec<f64>)> {
    let (cin, cout) = (rng.random_range(1..5), rng.random_range(1..5));
    let k = [1, 3, 5][rng.random_range(0..3)];
    let stride = rng.random_range(1..3);
    let (h, w) = (rng.random_range(k.max(2)..9), rng.random_range(k.max(2)..9));
    let mut p = ConvParams::normal(cin, cout, k, stride, true, 0.5, rng);
    p.bias = Some(randn(&[cout], rng));
    let x = randn(&[cin, h, w], rng);
    let fast = conv2d(&p, &x)?;
    let pad = p.padding as isize;
    let (ho, wo) = (
        (h + 2 * p.padding - k) / stride + 1,
        (w + 2 * p.padding - k) / stride + 1,
    );
    let mut naive = Vec::with_capacity(cout * ho * wo);
    for o in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = p.bias.as_ref().map_or(0.0, |b| b.data()[o]);
                for i in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let y = (oy * stride + ky) as isize - pad;
                            let xx = (ox * stride + kx) as isize - pad;
                            if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                                let wv = p.weight.data()[((o * cin + i) * k + ky) * k + kx];
                                acc += wv * x.at3(i, y as usize, xx as usize);
                            }
                        }
                    }
                }
                naive.push(acc);
            }
        }
    }
    Ok((fast, naive))
}

/// Column `j` of the result is `Σ_p a_pj · W_φ x_p` with
/// `a_·j = softmax_p(√c · ⟨ψ_j, x_p / ‖x_p‖⟩)`.
fn pooling_case(rng: &mut ChaCha8Rng) -> Result<(Tensor<f64>, Vec<f64>)> {
    let (ci, c, n) = (
        rng.random_range(1..6),
        4 * rng.random_range(1..3),
        rng.random_range(1..5),
    );
    let (h, w) = (rng.random_range(1..6), rng.random_range(1..6));
    let p = CollectorParams {
        entities: LinearParams {
            weight: randn(&[n, ci], rng),
            bias: None,
        },
        embed: LinearParams {
            weight: randn(&[c, ci], rng),
            bias: None,
        },
        gcn: GcnParams::init(c, rng),
    };
    let x = randn(&[ci, h, w], rng);
    let fast = collect_context(&LevelFeature::new(2, x.clone()), &p)?;
    let hw = h * w;
    let col = |q: usize| -> Vec<f64> { (0..ci).map(|ch| x.data()[ch * hw + q]).collect() };
    let mut naive = vec![0.0; c * n];
    for j in 0..n {
        let psi = &p.entities.weight.data()[j * ci..(j + 1) * ci];
        let logits: Vec<f64> = (0..hw)
            .map(|q| {
                let v = col(q);
                let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(crate::tensor::L2_EPS);
                (ci as f64).sqrt() * psi.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() / norm
            })
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for (q, l) in logits.iter().enumerate() {
            let a = (l - m).exp() / z;
            let v = col(q);
            for o in 0..c {
                let phi = &p.embed.weight.data()[o * ci..(o + 1) * ci];
                naive[o * n + j] += a * phi.iter().zip(&v).map(|(s, t)| s * t).sum::<f64>();
            }
        }
    }
    Ok((fast, naive))
}

fn compatibility_case(rng: &mut ChaCha8Rng) -> Result<(Tensor<f64>, Vec<f64>)> {
    let (nq, d, nk) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..7));
    let scale_dim = rng.random_range(1..9);
    let q = randn(&[nq, d], rng);
    let k = randn(&[d, nk], rng);
    let fast = compatibility(&q, &k, scale_dim)?.values;
    let norms: Vec<f64> = (0..nk)
        .map(|j| {
            (0..d)
                .map(|i| k.at2(i, j).powi(2))
                .sum::<f64>()
                .sqrt()
                .max(crate::tensor::L2_EPS)
        })
        .collect();
    let mut naive = vec![0.0; nk * nq];
    for a in 0..nq {
        let logits: Vec<f64> = (0..nk)
            .map(|j| (scale_dim as f64).sqrt() * (0..d).map(|i| q.at2(a, i) * k.at2(i, j)).sum::<f64>() / norms[j])
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for j in 0..nk {
            naive[j * nq + a] = (logits[j] - m).exp() / z;
        }
    }
    Ok((fast, naive))
}

fn reassembly_case(rng: &mut ChaCha8Rng, up: bool) -> Result<(Tensor<f64>, Vec<f64>)> {
    let k = [1, 3, 5][rng.random_range(0..3)];
    let c = rng.random_range(1..4);
    let (h, w) = (rng.random_range(1..6), rng.random_range(1..6));
    let (sh, sw, oh, ow) = if up { (h, w, 2 * h, 2 * w) } else { (2 * h, 2 * w, h, w) };
    let src = randn(&[c, sh, sw], rng);
    let kernels = ReassemblyKernels {
        values: softmax(&randn(&[k * k, oh, ow], rng), 0)?,
    };
    let fast = if up {
        reassemble_up(&src, &kernels)?
    } else {
        reassemble_down(&src, &kernels)?
    };
    let r = k / 2;
    // Explicitly padded copy of the source.
    let (ph, pw) = (sh + 2 * r, sw + 2 * r);
    let mut padded = vec![0.0; c * ph * pw];
    for ch in 0..c {
        for y in 0..sh {
            for x in 0..sw {
                padded[(ch * ph + y + r) * pw + x + r] = src.at3(ch, y, x);
            }
        }
    }
    let centre = |o: usize| if up { o / 2 } else { 2 * o };
    let mut naive = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let (cy, cx) = (centre(y), centre(x));
                let mut acc = 0.0;
                for dy in 0..k {
                    for dx in 0..k {
                        acc += kernels.values.at3(dy * k + dx, y, x) * padded[(ch * ph + cy + dy) * pw + cx + dx];
                    }
                }
                naive.push(acc);
            }
        }
    }
    Ok((fast, naive))
}

fn shuffle_case(rng: &mut ChaCha8Rng) -> Result<(Tensor<f64>, Vec<f64>)> {
    let s = rng.random_range(1..4);
    let q = rng.random_range(1..4);
    let (h, w) = (rng.random_range(1..5), rng.random_range(1..5));
    let x = randn(&[q * s * s, h, w], rng);
    let fast = pixel_shuffle(&x, s)?;
    let mut naive = Vec::with_capacity(x.len());
    for ch in 0..q {
        for y in 0..h * s {
            for xx in 0..w * s {
                naive.push(x.at3(ch * s * s + (y % s) * s + xx % s, y / s, xx / s));
            }
        }
    }
    Ok((fast, naive))
}

/// Separable tent weights `max(0, 1 − |src − i|)` with the source
/// coordinate clamped to the image.
fn bilinear_case(rng: &mut ChaCha8Rng) -> Result<(Tensor<f64>, Vec<f64>)> {
    let s = rng.random_range(1..5);
    let c = rng.random_range(1..3);
    let (h, w) = (rng.random_range(1..6), rng.random_range(1..6));
    let x = randn(&[c, h, w], rng);
    let fast = bilinear_upsample(&x, s)?;
    let src = |o: usize, n: usize| ((o as f64 + 0.5) / s as f64 - 0.5).clamp(0.0, (n - 1) as f64);
    let tent = |d: f64| (1.0 - d.abs()).max(0.0);
    let mut naive = Vec::with_capacity(c * h * w * s * s);
    for ch in 0..c {
        for oy in 0..h * s {
            for ox in 0..w * s {
                let (sy, sx) = (src(oy, h), src(ox, w));
                let mut acc = 0.0;
                for iy in 0..h {
                    for ix in 0..w {
                        acc += tent(sy - iy as f64) * tent(sx - ix as f64) * x.at3(ch, iy, ix);
                    }
                }
                naive.push(acc);
            }
        }
    }
    Ok((fast, naive))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_oracle_agrees() {
        for r in run_oracles(11, 10).unwrap() {
            assert!(r.passed, "{} max err {}", r.op, r.max_err);
        }
    }
}

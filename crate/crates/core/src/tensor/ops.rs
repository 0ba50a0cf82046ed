use rayon::prelude::*;

use super::{Scalar, Tensor};
use crate::error::{ensure_dim, Result};

/// Stabilizer for L2 normalization.
pub const L2_EPS: f64 = 1e-12;
/// Stabilizer for layer normalization.
pub const LN_EPS: f64 = 1e-5;

// Below this many multiply-adds a product stays on the calling thread.
const PAR_THRESHOLD: usize = 1 << 15;

/// Row-major `m×k · k×n` product. Each output element is reduced over `k`
/// in ascending order, so results do not depend on the worker count.
pub(crate) fn gemm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![T::zero(); m * n];
    if m == 0 || n == 0 || k == 0 {
        return out;
    }
    let row = |(i, out_row): (usize, &mut [T])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

pub(crate) fn transpose_raw<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// `aᵀ · b` with `a: k×m`, `b: k×n`.
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    gemm(&transpose_raw(a, k, m), b, m, k, n)
}

/// `a · bᵀ` with `a: m×k`, `b: n×k`.
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    gemm(a, &transpose_raw(b, n, k), m, k, n)
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    ensure_dim!(k == k2, "matmul inner extents differ: {m}×{k} · {k2}×{n}");
    Tensor::new(&[m, n], gemm(a.data(), b.data(), m, k, n))
}

/// Adjoints of `a · b` given the output adjoint `g`.
pub fn matmul_backward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, g: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (m, k) = a.dims2()?;
    let (_, n) = b.dims2()?;
    ensure_dim!(
        g.shape() == [m, n],
        "matmul adjoint has shape {:?}, want [{m}, {n}]",
        g.shape()
    );
    let ga = gemm_nt(g.data(), b.data(), m, n, k);
    let gb = gemm_tn(a.data(), g.data(), m, k, n);
    Ok((Tensor::new(&[m, k], ga)?, Tensor::new(&[k, n], gb)?))
}

/// Splits a shape around `axis` into `(outer, len, inner)`.
fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    ensure_dim!(axis < shape.len(), "axis {axis} out of range for shape {shape:?}");
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Softmax along `axis` with max subtraction. Denominators accumulate in
/// f64 so that f32 slices still sum to one within a few ulps.
pub fn softmax<T: Scalar>(t: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, n, inner) = axis_split(t.shape(), axis)?;
    let x = t.data();
    let mut y = vec![T::zero(); x.len()];
    let mut e = vec![0.0f64; n];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * n + a) * inner + i;
            let mut max = T::neg_infinity();
            for a in 0..n {
                max = max.max(x[idx(a)]);
            }
            let mut sum = 0.0f64;
            for a in 0..n {
                e[a] = (x[idx(a)] - max).exp().as_f64();
                sum += e[a];
            }
            for a in 0..n {
                y[idx(a)] = T::from_f64(e[a] / sum);
            }
        }
    }
    Tensor::new(t.shape(), y)
}

/// Input adjoint of softmax from its output `y` and output adjoint `g`.
pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, g: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    ensure_dim!(y.shape() == g.shape(), "softmax adjoint shape mismatch");
    let (outer, n, inner) = axis_split(y.shape(), axis)?;
    let (yd, gd) = (y.data(), g.data());
    let mut gx = vec![T::zero(); yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * n + a) * inner + i;
            let mut dot = T::zero();
            for a in 0..n {
                dot = dot + yd[idx(a)] * gd[idx(a)];
            }
            for a in 0..n {
                gx[idx(a)] = yd[idx(a)] * (gd[idx(a)] - dot);
            }
        }
    }
    Tensor::new(y.shape(), gx)
}

/// Divides every slice along `axis` by `max(‖slice‖₂, eps)`.
pub fn l2_normalize<T: Scalar>(t: &Tensor<T>, axis: usize, eps: f64) -> Result<Tensor<T>> {
    let (outer, n, inner) = axis_split(t.shape(), axis)?;
    let x = t.data();
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * n + a) * inner + i;
            let sq: f64 = (0..n).fold(0.0, |acc, a| {
                let v = x[idx(a)].as_f64();
                acc + v * v
            });
            let denom = T::from_f64(sq.sqrt().max(eps));
            for a in 0..n {
                y[idx(a)] = x[idx(a)] / denom;
            }
        }
    }
    Tensor::new(t.shape(), y)
}

pub fn l2_normalize_backward<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>, axis: usize, eps: f64) -> Result<Tensor<T>> {
    ensure_dim!(x.shape() == g.shape(), "l2_normalize adjoint shape mismatch");
    let (outer, n, inner) = axis_split(x.shape(), axis)?;
    let (xd, gd) = (x.data(), g.data());
    let mut gx = vec![T::zero(); xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * n + a) * inner + i;
            let sq: f64 = (0..n).fold(0.0, |acc, a| {
                let v = xd[idx(a)].as_f64();
                acc + v * v
            });
            let norm = sq.sqrt();
            if norm > eps {
                let nt = T::from_f64(norm);
                // d(x/‖x‖) = (I − y yᵀ)/‖x‖
                let mut yg = T::zero();
                for a in 0..n {
                    yg = yg + xd[idx(a)] / nt * gd[idx(a)];
                }
                for a in 0..n {
                    gx[idx(a)] = (gd[idx(a)] - xd[idx(a)] / nt * yg) / nt;
                }
            } else {
                let et = T::from_f64(eps);
                for a in 0..n {
                    gx[idx(a)] = gd[idx(a)] / et;
                }
            }
        }
    }
    Tensor::new(x.shape(), gx)
}

/// Elementwise `2 / (1 + e^{−x})`.
pub fn two_sigmoid<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let two = T::from_f64(2.0);
    t.map(|x| two / (T::one() + (-x).exp()))
}

/// Adjoint of [`two_sigmoid`] from its output `y`.
pub fn two_sigmoid_backward<T: Scalar>(y: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
    let half = T::from_f64(0.5);
    y.zip_map(g, |y, g| g * y * (T::one() - y * half))
}

pub fn sigmoid<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|x| T::one() / (T::one() + (-x).exp()))
}

pub fn sigmoid_backward<T: Scalar>(y: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
    y.zip_map(g, |y, g| g * y * (T::one() - y))
}

pub fn relu<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|x| if x > T::zero() { x } else { T::zero() })
}

/// Adjoint of ReLU given its input `x`.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_map(g, |x, g| if x > T::zero() { g } else { T::zero() })
}

pub struct LayerNormGrads<T> {
    pub input: Tensor<T>,
    pub gain: Tensor<T>,
    pub shift: Tensor<T>,
}

fn ln_stats<T: Scalar>(x: &[T], eps: f64) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().fold(0.0, |a, v| a + v.as_f64()) / n;
    let var = x.iter().fold(0.0, |a, v| {
        let d = v.as_f64() - mean;
        a + d * d
    }) / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Layer normalization of a vector with learned gain and shift.
pub fn layer_norm<T: Scalar>(t: &Tensor<T>, gain: &Tensor<T>, shift: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    ensure_dim!(
        t.rank() == 1 && gain.shape() == t.shape() && shift.shape() == t.shape(),
        "layer_norm expects matching vectors, got {:?}, {:?}, {:?}",
        t.shape(),
        gain.shape(),
        shift.shape()
    );
    ensure_dim!(!t.is_empty(), "layer_norm of an empty vector");
    let (mean, inv_std) = ln_stats(t.data(), eps);
    let out = t
        .data()
        .iter()
        .zip(gain.data().iter().zip(shift.data()))
        .map(|(&x, (&g, &b))| T::from_f64((x.as_f64() - mean) * inv_std) * g + b)
        .collect();
    Tensor::new(t.shape(), out)
}

pub fn layer_norm_backward<T: Scalar>(
    t: &Tensor<T>,
    gain: &Tensor<T>,
    g: &Tensor<T>,
    eps: f64,
) -> Result<LayerNormGrads<T>> {
    ensure_dim!(g.shape() == t.shape(), "layer_norm adjoint shape mismatch");
    let n = t.len();
    let (mean, inv_std) = ln_stats(t.data(), eps);
    let xhat: Vec<f64> = t.data().iter().map(|v| (v.as_f64() - mean) * inv_std).collect();
    let gxhat: Vec<f64> = g
        .data()
        .iter()
        .zip(gain.data())
        .map(|(a, b)| a.as_f64() * b.as_f64())
        .collect();
    let m1 = gxhat.iter().sum::<f64>() / n as f64;
    let m2 = gxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
    let input = gxhat
        .iter()
        .zip(&xhat)
        .map(|(&gx, &xh)| T::from_f64(inv_std * (gx - m1 - xh * m2)))
        .collect();
    let ggain = g
        .data()
        .iter()
        .zip(&xhat)
        .map(|(&gv, &xh)| T::from_f64(gv.as_f64() * xh))
        .collect();
    Ok(LayerNormGrads {
        input: Tensor::new(t.shape(), input)?,
        gain: Tensor::new(t.shape(), ggain)?,
        shift: g.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut r = rng();
        let b = Tensor::<f64>::randn(&[3, 4], 1.0, &mut r);
        assert_eq!(matmul(&Tensor::eye(3), &b).unwrap(), b);
        let a = Tensor::<f64>::randn(&[2, 3], 1.0, &mut r);
        let z = matmul(&a, &Tensor::zeros(&[3, 5])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut r = rng();
        let a = Tensor::<f64>::randn(&[4, 5], 1.0, &mut r);
        let b = Tensor::<f64>::randn(&[5, 3], 1.0, &mut r);
        let c = matmul(&a, &b).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let mut s = 0.0;
                for p in 0..5 {
                    s += a.at2(i, p) * b.at2(p, j);
                }
                assert!((c.at2(i, j) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_rejects_bad_inner() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[4, 2]);
        assert!(matches!(matmul(&a, &b), Err(crate::Error::Dim(_))));
    }

    #[test]
    fn softmax_known_values() {
        let t = Tensor::<f64>::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap();
        let y = softmax(&t, 0).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (i, v) in [1.0f64, 2.0, 3.0].iter().enumerate() {
            assert!((y.data()[i] - v.exp() / z).abs() < 1e-12);
        }
        let u = softmax(&Tensor::<f64>::zeros(&[4]), 0).unwrap();
        assert!(u.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn softmax_shift_invariant_on_inner_axis() {
        let mut r = rng();
        let t = Tensor::<f64>::randn(&[3, 4, 2], 1.0, &mut r);
        let shifted = t.map(|v| v + 3.0);
        let a = softmax(&t, 1).unwrap();
        let b = softmax(&shifted, 1).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
        for o in 0..3 {
            for i in 0..2 {
                let s: f64 = (0..4).map(|k| a.data()[(o * 4 + k) * 2 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn l2_normalize_cases() {
        let u = Tensor::<f64>::from_f64(&[3], &[0.6, 0.0, 0.8]).unwrap();
        assert!(l2_normalize(&u, 0, L2_EPS).unwrap().max_abs_diff(&u) < 1e-15);
        let z = Tensor::<f64>::zeros(&[4]);
        assert_eq!(l2_normalize(&z, 0, L2_EPS).unwrap(), z);
        let v = Tensor::<f64>::from_f64(&[2, 2], &[1.0, -2.0, 3.0, 0.5]).unwrap();
        // power-of-two scaling commutes exactly with every rounding step
        let a = l2_normalize(&v, 0, L2_EPS).unwrap();
        let b = l2_normalize(&v.scale(8.0), 0, L2_EPS).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn two_sigmoid_fixed_point_and_range() {
        let t = Tensor::<f64>::from_f64(&[5], &[0.0, 1.5, -1.5, 30.0, -30.0]).unwrap();
        let y = two_sigmoid(&t);
        assert_eq!(y.data()[0], 1.0);
        assert!((y.data()[1] - (2.0 - y.data()[2])).abs() < 1e-15);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 2.0));
        let mut prev = 0.0;
        for x in [1.0, 2.0, 4.0, 8.0, 16.0] {
            let v = two_sigmoid(&Tensor::<f64>::from_f64(&[1], &[x]).unwrap()).data()[0];
            assert!(v > prev && v < 2.0);
            prev = v;
        }
    }

    #[test]
    fn layer_norm_matches_scalar_loop() {
        let mut r = rng();
        let x = Tensor::<f64>::randn(&[6], 1.0, &mut r);
        let gain = Tensor::<f64>::randn(&[6], 1.0, &mut r);
        let shift = Tensor::<f64>::randn(&[6], 1.0, &mut r);
        let y = layer_norm(&x, &gain, &shift, LN_EPS).unwrap();
        let mut mean = 0.0;
        for v in x.data() {
            mean += v;
        }
        mean /= 6.0;
        let mut var = 0.0;
        for v in x.data() {
            var += (v - mean) * (v - mean);
        }
        var /= 6.0;
        for i in 0..6 {
            let want = (x.data()[i] - mean) / (var + LN_EPS).sqrt() * gain.data()[i] + shift.data()[i];
            assert!((y.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_constant_and_affine() {
        let ones = Tensor::<f64>::full(&[4], 1.0);
        let zeros = Tensor::<f64>::zeros(&[4]);
        let c = Tensor::<f64>::full(&[4], 3.5);
        assert!(layer_norm(&c, &ones, &zeros, LN_EPS)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let x = Tensor::<f64>::from_f64(&[4], &[1.0, 4.0, -2.0, 0.5]).unwrap();
        let a = layer_norm(&x, &ones, &zeros, LN_EPS).unwrap();
        let b = layer_norm(&x.map(|v| 10.0 * v + 7.0), &ones, &zeros, LN_EPS).unwrap();
        // eps is relatively 100× smaller for the scaled input
        assert!(a.max_abs_diff(&b) < 1e-5);
    }
}

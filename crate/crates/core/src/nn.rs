//! Spatial primitives on single `c×h×w` feature maps, each with an exact
//! backward pass.
//!
//! Convolution is cross-correlation with zero padding, lowered to a matrix
//! product through im2col.

use crate::error::{ensure_dim, Result};
use crate::params::ConvParams;
use crate::tensor::ops::{gemm, gemm_nt, gemm_tn};
use crate::tensor::{Scalar, Tensor};

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new<T: Scalar>(p: &ConvParams<T>, x: &Tensor<T>) -> Result<Self> {
        let (cin, h, w) = x.dims3()?;
        ensure_dim!(cin == p.in_ch(), "conv expects {} input channels, got {cin}", p.in_ch());
        let ho = p.out_extent(h);
        let wo = p.out_extent(w);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return Err(crate::error::dim_err!(
                "conv kernel {} larger than padded input {h}×{w}",
                p.kernel()
            ));
        };
        Ok(Self {
            cin,
            h,
            w,
            k: p.kernel(),
            stride: p.stride,
            pad: p.padding,
            ho,
            wo,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Visits `(column buffer index, input index)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (k, s, pad) = (self.k, self.stride, self.pad as isize);
        let npos = self.ho * self.wo;
        for ci in 0..self.cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    for oy in 0..self.ho {
                        let iy = (oy * s + ky) as isize - pad;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * s + kx) as isize - pad;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            f(
                                row * npos + oy * self.wo + ox,
                                (ci * self.h + iy as usize) * self.w + ix as usize,
                            );
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        if self.is_pointwise() {
            return x.to_vec();
        }
        let mut cols = vec![T::zero(); self.cin * self.k * self.k * self.ho * self.wo];
        self.for_each_tap(|c, i| cols[c] = x[i]);
        cols
    }

    fn col2im<T: Scalar>(&self, cols: &[T]) -> Vec<T> {
        if self.is_pointwise() {
            return cols.to_vec();
        }
        let mut x = vec![T::zero(); self.cin * self.h * self.w];
        self.for_each_tap(|c, i| x[i] = x[i] + cols[c]);
        x
    }
}

/// Zero-padded strided cross-correlation.
pub fn conv2d<T: Scalar>(p: &ConvParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let g = ConvGeom::new(p, x)?;
    let cols = g.im2col(x.data());
    let (cout, kk, npos) = (p.out_ch(), g.cin * g.k * g.k, g.ho * g.wo);
    let mut y = gemm(p.weight.data(), &cols, cout, kk, npos);
    if let Some(b) = &p.bias {
        for (o, row) in y.chunks_mut(npos.max(1)).enumerate().take(cout) {
            let bv = b.data()[o];
            row.iter_mut().for_each(|v| *v = *v + bv);
        }
    }
    Tensor::new(&[cout, g.ho, g.wo], y)
}

/// Input and parameter adjoints of [`conv2d`].
pub fn conv2d_backward<T: Scalar>(
    p: &ConvParams<T>,
    x: &Tensor<T>,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, ConvParams<T>)> {
    let g = ConvGeom::new(p, x)?;
    let (cout, kk, npos) = (p.out_ch(), g.cin * g.k * g.k, g.ho * g.wo);
    ensure_dim!(
        gy.shape() == [cout, g.ho, g.wo],
        "conv adjoint shape {:?}, want [{cout}, {}, {}]",
        gy.shape(),
        g.ho,
        g.wo
    );
    let cols = g.im2col(x.data());
    let gw = gemm_nt(gy.data(), &cols, cout, npos, kk);
    let gcols = gemm_tn(p.weight.data(), gy.data(), cout, kk, npos);
    let gx = g.col2im(&gcols);
    let gb = p.bias.as_ref().map(|_| {
        let sums = gy
            .data()
            .chunks(npos.max(1))
            .take(cout)
            .map(|r| r.iter().fold(T::zero(), |a, &v| a + v))
            .collect();
        Tensor::new(&[cout], sums).expect("bias adjoint")
    });
    Ok((
        Tensor::new(x.shape(), gx)?,
        ConvParams {
            weight: Tensor::new(p.weight.shape(), gw)?,
            bias: gb,
            stride: p.stride,
            padding: p.padding,
        },
    ))
}

/// Argmax positions recorded by [`max_pool2d`], one flat input index per
/// output element.
#[derive(Clone, Debug)]
pub struct PoolIndices {
    in_shape: Vec<usize>,
    argmax: Vec<usize>,
}

/// 2×2 max pooling with stride 2. Ties resolve to the first element in
/// row-major window order.
pub fn max_pool2d<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, PoolIndices)> {
    let (c, h, w) = x.dims3()?;
    ensure_dim!(h % 2 == 0 && w % 2 == 0, "max_pool2d needs even extents, got {h}×{w}");
    let (ho, wo) = (h / 2, w / 2);
    let xd = x.data();
    let mut y = Vec::with_capacity(c * ho * wo);
    let mut argmax = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = (ch * h + 2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = (ch * h + 2 * oy + dy) * w + 2 * ox + dx;
                    if xd[i] > xd[best] {
                        best = i;
                    }
                }
                y.push(xd[best]);
                argmax.push(best);
            }
        }
    }
    Ok((
        Tensor::new(&[c, ho, wo], y)?,
        PoolIndices {
            in_shape: x.shape().to_vec(),
            argmax,
        },
    ))
}

pub fn max_pool2d_backward<T: Scalar>(idx: &PoolIndices, gy: &Tensor<T>) -> Result<Tensor<T>> {
    ensure_dim!(gy.len() == idx.argmax.len(), "max_pool2d adjoint size mismatch");
    let mut gx = Tensor::zeros(&idx.in_shape);
    let gd = gx.data_mut();
    for (&i, &g) in idx.argmax.iter().zip(gy.data()) {
        gd[i] = gd[i] + g;
    }
    Ok(gx)
}

/// Per-axis bilinear taps `(i0, i1, frac)` for half-pixel-centre resizing.
fn bilinear_taps(n: usize, s: usize) -> Vec<(usize, usize, f64)> {
    (0..n * s)
        .map(|o| {
            let src = ((o as f64 + 0.5) / s as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear upsampling by an integer factor with half-pixel alignment and
/// border clamping.
pub fn bilinear_upsample<T: Scalar>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3()?;
    ensure_dim!(s >= 1, "upsampling factor must be positive");
    let (ty, tx) = (bilinear_taps(h, s), bilinear_taps(w, s));
    let (ho, wo) = (h * s, w * s);
    let xd = x.data();
    let mut y = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        let base = ch * h * w;
        for &(y0, y1, ly) in &ty {
            let (ly, hy) = (T::from_f64(ly), T::from_f64(1.0 - ly));
            for &(x0, x1, lx) in &tx {
                let (lx, hx) = (T::from_f64(lx), T::from_f64(1.0 - lx));
                let v = hy * (hx * xd[base + y0 * w + x0] + lx * xd[base + y0 * w + x1])
                    + ly * (hx * xd[base + y1 * w + x0] + lx * xd[base + y1 * w + x1]);
                y.push(v);
            }
        }
    }
    Tensor::new(&[c, ho, wo], y)
}

pub fn bilinear_upsample_backward<T: Scalar>(in_shape: &[usize], gy: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    ensure_dim!(gy.shape() == [c, h * s, w * s], "bilinear adjoint shape mismatch");
    let (ty, tx) = (bilinear_taps(h, s), bilinear_taps(w, s));
    let mut gx = Tensor::zeros(in_shape);
    let gd = gx.data_mut();
    let mut it = gy.data().iter();
    for ch in 0..c {
        let base = ch * h * w;
        for &(y0, y1, ly) in &ty {
            let (ly, hy) = (T::from_f64(ly), T::from_f64(1.0 - ly));
            for &(x0, x1, lx) in &tx {
                let (lx, hx) = (T::from_f64(lx), T::from_f64(1.0 - lx));
                let g = *it.next().expect("adjoint length");
                gd[base + y0 * w + x0] = gd[base + y0 * w + x0] + g * hy * hx;
                gd[base + y0 * w + x1] = gd[base + y0 * w + x1] + g * hy * lx;
                gd[base + y1 * w + x0] = gd[base + y1 * w + x0] + g * ly * hx;
                gd[base + y1 * w + x1] = gd[base + y1 * w + x1] + g * ly * lx;
            }
        }
    }
    Ok(gx)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn nearest_upsample<T: Scalar>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3()?;
    let (ho, wo) = (h * s, w * s);
    let mut y = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                y.push(x.at3(ch, oy / s, ox / s));
            }
        }
    }
    Tensor::new(&[c, ho, wo], y)
}

pub fn nearest_upsample_backward<T: Scalar>(gy: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let (c, ho, wo) = gy.dims3()?;
    ensure_dim!(
        ho % s == 0 && wo % s == 0,
        "nearest adjoint extents not divisible by {s}"
    );
    let (h, w) = (ho / s, wo / s);
    let mut gx = Tensor::zeros(&[c, h, w]);
    let gd = gx.data_mut();
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let i = (ch * h + oy / s) * w + ox / s;
                gd[i] = gd[i] + gy.at3(ch, oy, ox);
            }
        }
    }
    Ok(gx)
}

/// Sub-pixel rearrangement `(s²·q)×h×w → q×sh×sw` with
/// `out[g, s·y+dy, s·x+dx] = in[g·s² + dy·s + dx, y, x]`.
pub fn pixel_shuffle<T: Scalar>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3()?;
    ensure_dim!(
        s >= 1 && c % (s * s) == 0,
        "pixel_shuffle: {c} channels not divisible by {}",
        s * s
    );
    let q = c / (s * s);
    let (ho, wo) = (h * s, w * s);
    let mut y = vec![T::zero(); c * h * w];
    for g in 0..q {
        for dy in 0..s {
            for dx in 0..s {
                let cin = g * s * s + dy * s + dx;
                for iy in 0..h {
                    for ix in 0..w {
                        y[(g * ho + s * iy + dy) * wo + s * ix + dx] = x.at3(cin, iy, ix);
                    }
                }
            }
        }
    }
    Tensor::new(&[q, ho, wo], y)
}

/// Inverse of [`pixel_shuffle`]; also its adjoint.
pub fn pixel_unshuffle<T: Scalar>(y: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let (q, ho, wo) = y.dims3()?;
    ensure_dim!(
        s >= 1 && ho % s == 0 && wo % s == 0,
        "pixel_unshuffle: extents {ho}×{wo} not divisible by {s}"
    );
    let (h, w) = (ho / s, wo / s);
    let c = q * s * s;
    let mut x = vec![T::zero(); c * h * w];
    for g in 0..q {
        for dy in 0..s {
            for dx in 0..s {
                let cin = g * s * s + dy * s + dx;
                for iy in 0..h {
                    for ix in 0..w {
                        x[(cin * h + iy) * w + ix] = y.at3(g, s * iy + dy, s * ix + dx);
                    }
                }
            }
        }
    }
    Tensor::new(&[c, h, w], x)
}

/// Stacks `a` over `b` along the channel axis.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (c1, h, w) = a.dims3()?;
    let (c2, h2, w2) = b.dims3()?;
    ensure_dim!((h, w) == (h2, w2), "concat spatial mismatch {h}×{w} vs {h2}×{w2}");
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(&[c1 + c2, h, w], data)
}

/// Splits off the first `c1` channels; the adjoint of [`concat_channels`].
pub fn split_channels<T: Scalar>(t: &Tensor<T>, c1: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (c, h, w) = t.dims3()?;
    ensure_dim!(c1 <= c, "cannot split {c1} channels from {c}");
    let at = c1 * h * w;
    Ok((
        Tensor::new(&[c1, h, w], t.data()[..at].to_vec())?,
        Tensor::new(&[c - c1, h, w], t.data()[at..].to_vec())?,
    ))
}

/// Multiplies each channel of `x` by the matching entry of `gate`.
pub fn scale_channels<T: Scalar>(x: &Tensor<T>, gate: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3()?;
    ensure_dim!(gate.shape() == [c], "gate shape {:?} for {c} channels", gate.shape());
    let hw = h * w;
    let mut y = x.data().to_vec();
    for (ch, row) in y.chunks_mut(hw.max(1)).enumerate().take(c) {
        let g = gate.data()[ch];
        row.iter_mut().for_each(|v| *v = *v * g);
    }
    Tensor::new(x.shape(), y)
}

/// Returns `(input adjoint, gate adjoint)`.
pub fn scale_channels_backward<T: Scalar>(
    x: &Tensor<T>,
    gate: &Tensor<T>,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (c, h, w) = x.dims3()?;
    let hw = h * w;
    let gx = scale_channels(gy, gate)?;
    let gg = (0..c)
        .map(|ch| {
            let r = ch * hw..(ch + 1) * hw;
            x.data()[r.clone()]
                .iter()
                .zip(&gy.data()[r])
                .fold(T::zero(), |a, (&xv, &gv)| a + xv * gv)
        })
        .collect();
    Ok((gx, Tensor::new(&[c], gg)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn identity_pointwise_conv() {
        let mut r = rng(1);
        let x = Tensor::<f64>::randn(&[3, 4, 5], 1.0, &mut r);
        let mut w = Tensor::zeros(&[3, 3, 1, 1]);
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0;
        }
        let p = ConvParams::new(w, None, 1, 0).unwrap();
        assert_eq!(conv2d(&p, &x).unwrap(), x);
    }

    #[test]
    fn zero_weight_conv_is_bias() {
        let mut r = rng(2);
        let x = Tensor::<f64>::randn(&[2, 5, 5], 1.0, &mut r);
        let b = Tensor::from_f64(&[2], &[0.5, -1.25]).unwrap();
        let p = ConvParams::new(Tensor::zeros(&[2, 2, 3, 3]), Some(b), 1, 1).unwrap();
        let y = conv2d(&p, &x).unwrap();
        assert_eq!(y.shape(), &[2, 5, 5]);
        assert!(y.data()[..25].iter().all(|&v| v == 0.5));
        assert!(y.data()[25..].iter().all(|&v| v == -1.25));
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let p = ConvParams::<f64>::new(Tensor::zeros(&[1, 2, 3, 3]), None, 1, 1).unwrap();
        assert!(conv2d(&p, &Tensor::zeros(&[3, 4, 4])).is_err());
    }

    #[test]
    fn max_pool_cases() {
        let x = Tensor::<f64>::from_f64(&[1, 2, 2], &[1.0, 3.0, 2.0, 0.0]).unwrap();
        let (y, _) = max_pool2d(&x).unwrap();
        assert_eq!(y.data(), &[3.0]);
        let c = Tensor::<f64>::full(&[2, 4, 4], 1.5);
        assert_eq!(max_pool2d(&c).unwrap().0, Tensor::full(&[2, 2, 2], 1.5));
        assert!(max_pool2d(&Tensor::<f64>::zeros(&[1, 3, 4])).is_err());
        // ties route the adjoint to the first window element
        let t = Tensor::<f64>::full(&[1, 2, 2], 2.0);
        let (_, idx) = max_pool2d(&t).unwrap();
        let g = max_pool2d_backward(&idx, &Tensor::full(&[1, 1, 1], 1.0)).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn max_pool_ramp_picks_bottom_right() {
        // v = y·w + x increases along both axes
        let (h, w) = (4, 6);
        let x = Tensor::<f64>::new(&[1, h, w], (0..h * w).map(|v| v as f64).collect()).unwrap();
        let (y, _) = max_pool2d(&x).unwrap();
        for oy in 0..h / 2 {
            for ox in 0..w / 2 {
                assert_eq!(y.at3(0, oy, ox), x.at3(0, 2 * oy + 1, 2 * ox + 1));
            }
        }
    }

    #[test]
    fn bilinear_constant_and_ramp() {
        let c = Tensor::<f64>::full(&[2, 3, 3], 0.7);
        let u = bilinear_upsample(&c, 2).unwrap();
        assert!(u.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        let x = Tensor::<f64>::new(&[1, 2, 4], vec![0.0, 1.0, 2.0, 3.0, 0.0, 1.0, 2.0, 3.0]).unwrap();
        let u = bilinear_upsample(&x, 2).unwrap();
        // interior columns follow the ramp (ox + 0.5)/2 − 0.5
        for ox in 1..7 {
            let want = (ox as f64 + 0.5) / 2.0 - 0.5;
            assert!((u.at3(0, 1, ox) - want).abs() < 1e-15);
        }
    }

    #[test]
    fn bilinear_hand_values() {
        let x = Tensor::<f64>::from_f64(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let u = bilinear_upsample(&x, 2).unwrap();
        // corners clamp, inner samples sit at 1/4 and 3/4
        assert_eq!(u.at3(0, 0, 0), 1.0);
        assert!((u.at3(0, 1, 1) - (0.5625 * 1.0 + 0.1875 * 2.0 + 0.1875 * 3.0 + 0.0625 * 4.0)).abs() < 1e-15);
        assert_eq!(u.at3(0, 3, 3), 4.0);
    }

    #[test]
    fn pixel_shuffle_layout() {
        let x = Tensor::<f64>::from_f64(&[4, 1, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(pixel_shuffle(&Tensor::<f64>::zeros(&[3, 2, 2]), 2).is_err());
        let mut r = rng(3);
        let z = Tensor::<f64>::randn(&[8, 3, 3], 1.0, &mut r);
        assert_eq!(pixel_unshuffle(&pixel_shuffle(&z, 2).unwrap(), 2).unwrap(), z);
    }

    #[test]
    fn concat_with_empty_and_split() {
        let mut r = rng(4);
        let a = Tensor::<f64>::randn(&[2, 3, 3], 1.0, &mut r);
        let b = Tensor::<f64>::randn(&[3, 3, 3], 1.0, &mut r);
        let empty = Tensor::<f64>::zeros(&[0, 3, 3]);
        assert_eq!(concat_channels(&a, &empty).unwrap(), a);
        let ab = concat_channels(&a, &b).unwrap();
        let (a2, b2) = split_channels(&ab, 2).unwrap();
        assert_eq!((a2, b2), (a, b));
        assert!(concat_channels(&Tensor::<f64>::zeros(&[1, 2, 3]), &Tensor::zeros(&[1, 3, 3])).is_err());
    }
}

//! Parameter containers and the named-tensor visitor used for
//! serialization, optimizer updates, gradient checks and parameter audits.

use rand::Rng;

use crate::error::{ensure_dim, Result};
use crate::tensor::{ops::gemm, Scalar, Tensor};

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// A tree of named parameter tensors.
///
/// Gradients use the same type as the parameters they belong to, so a model
/// and its gradient store always visit tensors in the same order.
pub trait ParamSet<T: Scalar>: Clone {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>));

    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, t| out.push((n, t)));
        out
    }

    fn num_elements(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut("", &mut |_, t| t.fill(T::zero()));
        z
    }

    fn to_flat(&self) -> Vec<Tensor<T>> {
        let mut out = Vec::new();
        self.visit("", &mut |_, t| out.push(t.clone()));
        out
    }

    /// Overwrites every tensor, in visit order, from `tensors`.
    fn load_flat(&mut self, tensors: &[Tensor<T>]) -> Result<()> {
        let mut i = 0;
        let mut bad = None;
        self.visit_mut("", &mut |name, t| {
            match tensors.get(i) {
                Some(src) if src.shape() == t.shape() => *t = src.clone(),
                _ => bad = bad.take().or(Some(name)),
            }
            i += 1;
        });
        ensure_dim!(bad.is_none(), "cannot load parameter {:?}", bad);
        ensure_dim!(i == tensors.len(), "expected {i} tensors, got {}", tensors.len());
        Ok(())
    }

    /// `self += k · other`, tensor by tensor.
    fn axpy(&mut self, k: T, other: &Self) {
        let src = other.to_flat();
        let mut i = 0;
        self.visit_mut("", &mut |_, t| {
            for (a, &b) in t.data_mut().iter_mut().zip(src[i].data()) {
                *a = *a + k * b;
            }
            i += 1;
        });
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, t| ok &= t.is_finite());
        ok
    }
}

impl<T: Scalar, P: ParamSet<T>> ParamSet<T> for Option<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        if let Some(p) = self {
            p.visit(prefix, f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        if let Some(p) = self {
            p.visit_mut(prefix, f);
        }
    }
}

/// A bare tensor is a leaf parameter.
impl<T: Scalar> ParamSet<T> for Tensor<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(prefix.to_string(), self);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(prefix.to_string(), self);
    }
}

/// Kaiming-normal standard deviation for a given fan-in.
pub fn kaiming_std(fan_in: usize) -> f64 {
    (2.0 / fan_in.max(1) as f64).sqrt()
}

/// Weight matrix of a 1×1 / 1-D convolution with an optional bias.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> LinearParams<T> {
    pub fn new(weight: Tensor<T>, bias: Option<Tensor<T>>) -> Result<Self> {
        let (out, _) = weight.dims2()?;
        if let Some(b) = &bias {
            ensure_dim!(b.shape() == [out], "bias shape {:?} for {out} outputs", b.shape());
        }
        Ok(Self { weight, bias })
    }

    pub fn kaiming<R: Rng + ?Sized>(out_dim: usize, in_dim: usize, bias: bool, rng: &mut R) -> Self {
        Self {
            weight: Tensor::randn(&[out_dim, in_dim], kaiming_std(in_dim), rng),
            bias: bias.then(|| Tensor::zeros(&[out_dim])),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    /// `W · x (+ b)` for `x` of shape `in_dim × n`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (o, i) = self.weight.dims2()?;
        let (xi, n) = x.dims2()?;
        ensure_dim!(xi == i, "linear expects {i} input rows, got {xi}");
        let mut y = gemm(self.weight.data(), x.data(), o, i, n);
        if let Some(b) = &self.bias {
            for (r, row) in y.chunks_mut(n.max(1)).enumerate().take(o) {
                let bv = b.data()[r];
                row.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
        Tensor::new(&[o, n], y)
    }

    /// Returns `(input adjoint, parameter adjoints)`.
    pub fn backward(&self, x: &Tensor<T>, g: &Tensor<T>) -> Result<(Tensor<T>, Self)> {
        let (gw, gx) = crate::tensor::matmul_backward(&self.weight, x, g)?;
        let gb = self.bias.as_ref().map(|_| {
            let (o, n) = (g.shape()[0], g.shape()[1]);
            let sums = (0..o)
                .map(|r| g.data()[r * n..(r + 1) * n].iter().fold(T::zero(), |a, &v| a + v))
                .collect();
            Tensor::new(&[o], sums).expect("bias adjoint")
        });
        Ok((gx, Self { weight: gw, bias: gb }))
    }
}

impl<T: Scalar> ParamSet<T> for LinearParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

/// Square-kernel 2-D convolution parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    /// `out_ch × in_ch × k × k`
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(weight: Tensor<T>, bias: Option<Tensor<T>>, stride: usize, padding: usize) -> Result<Self> {
        ensure_dim!(
            weight.rank() == 4,
            "conv weight must be rank 4, got {:?}",
            weight.shape()
        );
        let s = weight.shape();
        ensure_dim!(s[2] == s[3] && s[2] >= 1, "conv kernel must be square, got {:?}", s);
        ensure_dim!(stride >= 1, "conv stride must be positive");
        if let Some(b) = &bias {
            ensure_dim!(
                b.shape() == [s[0]],
                "conv bias shape {:?} for {} outputs",
                b.shape(),
                s[0]
            );
        }
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// Kaiming-normal weights, zero bias, "same" padding `(k−1)/2`.
    pub fn kaiming<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        Self::normal(in_ch, out_ch, k, stride, bias, kaiming_std(in_ch * k * k), rng)
    }

    pub fn normal<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        bias: bool,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: Tensor::randn(&[out_ch, in_ch, k, k], std, rng),
            bias: bias.then(|| Tensor::zeros(&[out_ch])),
            stride,
            padding: (k - 1) / 2,
        }
    }

    pub fn out_ch(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_ch(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    /// Output spatial extent for an input extent, if positive.
    pub fn out_extent(&self, n: usize) -> Option<usize> {
        let padded = n + 2 * self.padding;
        (padded >= self.kernel()).then(|| (padded - self.kernel()) / self.stride + 1)
    }
}

impl<T: Scalar> ParamSet<T> for ConvParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

/// Random matrix with orthonormal rows (or orthonormal columns when there
/// are more rows than columns), via Gram–Schmidt on Gaussian draws.
pub fn orthonormal_rows<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor<T> {
    let g: Tensor<f64> = Tensor::randn(&[rows, cols], 1.0, rng);
    let transpose = rows > cols;
    let (r, c, mut m) = if transpose {
        (cols, rows, g.transpose().expect("matrix").into_data())
    } else {
        (rows, cols, g.into_data())
    };
    for i in 0..r {
        for j in 0..i {
            let d: f64 = (0..c).map(|k| m[i * c + k] * m[j * c + k]).sum();
            for k in 0..c {
                m[i * c + k] -= d * m[j * c + k];
            }
        }
        let n: f64 = (0..c).map(|k| m[i * c + k] * m[i * c + k]).sum::<f64>().sqrt();
        for k in 0..c {
            m[i * c + k] /= n;
        }
    }
    let t = Tensor::<f64>::new(&[r, c], m).expect("shape");
    let t = if transpose { t.transpose().expect("matrix") } else { t };
    t.cast()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthonormal_rows_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w: Tensor<f64> = orthonormal_rows(3, 5, &mut rng);
        let wwt = crate::tensor::matmul(&w, &w.transpose().unwrap()).unwrap();
        assert!(wwt.max_abs_diff(&Tensor::eye(3)) < 1e-12);
        let tall: Tensor<f64> = orthonormal_rows(5, 3, &mut rng);
        let wtw = crate::tensor::matmul(&tall.transpose().unwrap(), &tall).unwrap();
        assert!(wtw.max_abs_diff(&Tensor::eye(3)) < 1e-12);
    }

    #[test]
    fn load_flat_round_trip_and_axpy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = ConvParams::<f64>::kaiming(2, 3, 3, 1, true, &mut rng);
        let mut q = p.zeros_like();
        q.load_flat(&p.to_flat()).unwrap();
        assert_eq!(p, q);
        q.axpy(-1.0, &p);
        assert!(q.to_flat().iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
        assert_eq!(p.num_elements(), 3 * 2 * 9 + 3);
        let names: Vec<_> = p.named().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["weight", "bias"]);
    }
}

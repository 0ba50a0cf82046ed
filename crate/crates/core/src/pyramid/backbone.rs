use rand::Rng;

use crate::error::{ensure_dim, Result};
use crate::level::LevelFeature;
use crate::nn::{conv2d, conv2d_backward};
use crate::params::{join, ConvParams, ParamSet};
use crate::tensor::{relu, relu_backward, Scalar, Tensor};

use super::config::BackboneSpec;

/// Two strided stem convs followed by three strided stages, all 3×3 with
/// ReLU. Emits the stride 4, 8, 16 and 32 maps.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams<T> {
    pub layers: Vec<ConvParams<T>>,
}

impl<T: Scalar> BackboneParams<T> {
    pub fn init<R: Rng + ?Sized>(spec: &BackboneSpec, rng: &mut R) -> Self {
        let [c2, c3, c4, c5] = spec.channels;
        let stem = (c2 / 2).max(1);
        let dims = [(3, stem), (stem, c2), (c2, c3), (c3, c4), (c4, c5)];
        Self {
            layers: dims
                .iter()
                .map(|&(i, o)| ConvParams::kaiming(i, o, 3, 2, true, rng))
                .collect(),
        }
    }
}

impl<T: Scalar> ParamSet<T> for BackboneParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("conv{i}")), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("conv{i}")), f);
        }
    }
}

#[derive(Clone, Debug)]
pub struct BackboneTrace<T> {
    inputs: Vec<Tensor<T>>,
    pre: Vec<Tensor<T>>,
}

pub fn toy_backbone_forward_traced<T: Scalar>(
    image: &Tensor<T>,
    params: &BackboneParams<T>,
) -> Result<(Vec<LevelFeature<T>>, BackboneTrace<T>)> {
    let (c, h, w) = image.dims3()?;
    ensure_dim!(c == 3, "backbone expects a 3-channel image, got {c}");
    ensure_dim!(
        h > 0 && w > 0 && h % 64 == 0 && w % 64 == 0,
        "image extents {h}×{w} must be positive multiples of 64"
    );
    ensure_dim!(params.layers.len() == 5, "backbone needs 5 conv layers");
    let mut x = image.clone();
    let mut inputs = Vec::new();
    let mut pre = Vec::new();
    let mut levels = Vec::new();
    for (i, layer) in params.layers.iter().enumerate() {
        let z = conv2d(layer, &x)?;
        inputs.push(std::mem::replace(&mut x, relu(&z)));
        pre.push(z);
        if i >= 1 {
            levels.push(LevelFeature::new(i + 1, x.clone()));
        }
    }
    Ok((levels, BackboneTrace { inputs, pre }))
}

/// Stride 4, 8, 16 and 32 features of the toy backbone.
pub fn toy_backbone_forward<T: Scalar>(
    image: &Tensor<T>,
    spec: &BackboneSpec,
    params: &BackboneParams<T>,
) -> Result<Vec<LevelFeature<T>>> {
    for (l, &c) in params.layers[1..].iter().zip(&spec.channels) {
        ensure_dim!(l.out_ch() == c, "backbone params do not match spec {:?}", spec.channels);
    }
    Ok(toy_backbone_forward_traced(image, params)?.0)
}

/// `g_levels` holds one adjoint per emitted level.
pub fn toy_backbone_backward<T: Scalar>(
    params: &BackboneParams<T>,
    trace: &BackboneTrace<T>,
    g_levels: &[Tensor<T>],
) -> Result<(Tensor<T>, BackboneParams<T>)> {
    ensure_dim!(g_levels.len() == 4, "backbone backward needs four level adjoints");
    let mut grads = params.zeros_like();
    let mut g: Option<Tensor<T>> = None;
    for i in (0..params.layers.len()).rev() {
        let mut g_act = g.take().unwrap_or_else(|| Tensor::zeros(trace.pre[i].shape()));
        if i >= 1 {
            g_act.add_assign(&g_levels[i - 1])?;
        }
        let g_pre = relu_backward(&trace.pre[i], &g_act)?;
        let (gx, gp) = conv2d_backward(&params.layers[i], &trace.inputs[i], &g_pre)?;
        grads.layers[i] = gp;
        g = Some(gx);
    }
    Ok((g.expect("at least one layer"), grads))
}

/// Stride-64 level from a strided 3×3 conv of the stride-32 map.
pub fn make_extra_level<T: Scalar>(f5: &LevelFeature<T>, params: &ConvParams<T>) -> Result<LevelFeature<T>> {
    ensure_dim!(
        params.stride == 2 && params.kernel() == 3,
        "extra level needs a 3×3 stride-2 conv"
    );
    Ok(LevelFeature {
        level: f5.level + 1,
        stride: f5.stride * 2,
        map: conv2d(params, &f5.map)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn strides_and_sizes() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let spec = BackboneSpec { channels: [4, 5, 6, 7] };
        let p = BackboneParams::<f32>::init(&spec, &mut r);
        let img = Tensor::randn(&[3, 64, 128], 1.0, &mut r);
        let levels = toy_backbone_forward(&img, &spec, &p).unwrap();
        let got: Vec<_> = levels.iter().map(|l| (l.stride, l.map.shape().to_vec())).collect();
        assert_eq!(
            got,
            vec![
                (4, vec![4, 16, 32]),
                (8, vec![5, 8, 16]),
                (16, vec![6, 4, 8]),
                (32, vec![7, 2, 4])
            ]
        );
        let extra = ConvParams::kaiming(7, 8, 3, 2, true, &mut r);
        let f6 = make_extra_level(&levels[3], &extra).unwrap();
        assert_eq!((f6.level, f6.stride, f6.map.shape()), (6, 64, &[8usize, 1, 2][..]));
    }

    #[test]
    fn rejects_indivisible_image() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let spec = BackboneSpec { channels: [4, 4, 4, 4] };
        let p = BackboneParams::<f32>::init(&spec, &mut r);
        assert!(toy_backbone_forward(&Tensor::zeros(&[3, 96, 64]), &spec, &p).is_err());
    }
}

//! Synthetic segmentation task that drives every backward path at once: a
//! 1×1 head on the finest pyramid output, bilinear ×4 upsampling and
//! per-pixel binary cross-entropy against masks of random shapes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::{bilinear_upsample, bilinear_upsample_backward, conv2d, conv2d_backward};
use crate::params::{join, ConvParams, ParamSet};
use crate::tensor::{DType, Scalar, Tensor};

use super::config::PyramidConfig;
use super::model::PyramidModel;

/// Offset mixed into the config seed for the dataset stream.
const DATA_SEED_OFFSET: u64 = 0x5eed_da7a;

/// One image with its binary foreground mask.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub image: Tensor<T>,
    pub mask: Tensor<T>,
}

/// Rectangles and disks at mixed scales over a noisy background.
pub fn synthetic_dataset<T: Scalar>(count: usize, height: usize, width: usize, seed: u64) -> Vec<Sample<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(DATA_SEED_OFFSET));
    (0..count).map(|_| synthetic_sample(height, width, &mut rng)).collect()
}

fn synthetic_sample<T: Scalar, R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Sample<T> {
    let plane = h * w;
    let mut image = vec![0.0f64; 3 * plane];
    let mut mask = vec![0.0f64; plane];
    let bg: [f64; 3] = [
        rng.random_range(-0.5..0.0),
        rng.random_range(-0.5..0.0),
        rng.random_range(-0.5..0.0),
    ];
    for (i, v) in image.iter_mut().enumerate() {
        *v = bg[i / plane] + rng.random_range(-0.1..0.1);
    }
    let side = h.min(w) as f64;
    let shapes = rng.random_range(2..=3);
    for s in 0..shapes {
        // one small, one medium, then anything
        let scale = match s {
            0 => rng.random_range(0.06..0.12),
            1 => rng.random_range(0.15..0.3),
            _ => rng.random_range(0.06..0.3),
        } * side;
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let colour: [f64; 3] = [
            rng.random_range(0.3..1.0),
            rng.random_range(0.3..1.0),
            rng.random_range(0.3..1.0),
        ];
        let disk = rng.random_bool(0.5);
        let aspect: f64 = rng.random_range(0.5..2.0);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let inside = if disk {
                    dy * dy + dx * dx <= scale * scale
                } else {
                    dy.abs() <= scale * aspect.sqrt() && dx.abs() <= scale / aspect.sqrt()
                };
                if inside {
                    mask[y * w + x] = 1.0;
                    for ch in 0..3 {
                        image[ch * plane + y * w + x] = colour[ch];
                    }
                }
            }
        }
    }
    Sample {
        image: Tensor::from_f64(&[3, h, w], &image).expect("image buffer"),
        mask: Tensor::from_f64(&[1, h, w], &mask).expect("mask buffer"),
    }
}

/// Model plus the 1×1 prediction head.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationNet<T> {
    pub model: PyramidModel<T>,
    pub head: ConvParams<T>,
}

impl<T: Scalar> SegmentationNet<T> {
    pub fn init(cfg: &PyramidConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = PyramidModel::init_with(cfg, &mut rng)?;
        let head = ConvParams::kaiming(cfg.c, 1, 1, 1, true, &mut rng);
        Ok(Self { model, head })
    }

    /// Full-resolution logits `1×H×W`.
    pub fn predict(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let levels = self.model.forward(image)?;
        bilinear_upsample(&conv2d(&self.head, &levels[0].map)?, 4)
    }

    /// Mean per-pixel BCE of one sample and the parameter gradients of
    /// that loss.
    pub fn loss_and_grad(&self, sample: &Sample<T>) -> Result<(f64, Self)> {
        let (levels, trace) = self.model.forward_traced(&sample.image)?;
        let coarse = conv2d(&self.head, &levels[0].map)?;
        let logits = bilinear_upsample(&coarse, 4)?;
        let (loss, g_logits) = bce_with_logits(&logits, &sample.mask)?;
        let g_coarse = bilinear_upsample_backward(coarse.shape(), &g_logits, 4)?;
        let (g_p2, head) = conv2d_backward(&self.head, &levels[0].map, &g_coarse)?;
        let mut g_levels: Vec<Tensor<T>> = levels.iter().map(|l| Tensor::zeros(l.map.shape())).collect();
        g_levels[0] = g_p2;
        let (_, model) = self.model.backward(&trace, &g_levels)?;
        Ok((loss, Self { model, head }))
    }
}

impl<T: Scalar> ParamSet<T> for SegmentationNet<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.model.visit(prefix, f);
        self.head.visit(&join(prefix, "head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.model.visit_mut(prefix, f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Mean binary cross-entropy on logits and its gradient.
pub fn bce_with_logits<T: Scalar>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    crate::error::ensure_dim!(logits.shape() == target.shape(), "logits and target differ in shape");
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &y) in logits.data().iter().zip(target.data()) {
        let (z, y) = (z.as_f64(), y.as_f64());
        // max(z,0) − z·y + log(1 + e^{−|z|})
        loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        let p = 1.0 / (1.0 + (-z).exp());
        grad.push(T::from_f64((p - y) / n));
    }
    Ok((loss / n, Tensor::new(logits.shape(), grad)?))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub reg_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    pub arch: String,
    pub steps: usize,
    pub lr: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// `final_loss / initial_loss`.
    pub ratio: f64,
    pub converged: bool,
    pub history: Vec<LossRecord>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,reg_loss\n");
        for r in &self.history {
            s.push_str(&format!("{},{:e},{:e}\n", r.step, r.loss, r.reg_loss));
        }
        s
    }
}

/// Required ratio of final to initial loss.
pub const CONVERGENCE_RATIO: f64 = 0.1;

/// Trains for `steps` momentum-SGD steps on the full synthetic batch and
/// returns the loss trajectory (one record per step before its update and
/// a final record after the last update) together with the trained net.
pub fn train_toy_with<T: Scalar>(
    cfg: &PyramidConfig,
    steps: usize,
    lr: f64,
) -> Result<(TrainReport, SegmentationNet<T>)> {
    cfg.validate()?;
    let (h, w) = cfg.image_size;
    let data = synthetic_dataset::<T>(cfg.train.images, h, w, cfg.seed);
    let mut net = SegmentationNet::<T>::init(cfg)?;
    let mut velocity = net.zeros_like();
    let lr_t = T::from_f64(lr);
    let mu = T::from_f64(cfg.train.momentum);
    let mut history = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let per_sample: Vec<(f64, SegmentationNet<T>)> =
            data.par_iter().map(|s| net.loss_and_grad(s)).collect::<Result<_>>()?;
        let scale = 1.0 / data.len() as f64;
        let task: f64 = per_sample.iter().map(|(l, _)| l).sum::<f64>() * scale;
        let reg = net.model.neck.reg_loss();
        let loss = task + reg;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        history.push(LossRecord {
            step,
            loss,
            reg_loss: reg,
        });
        if step == steps {
            break;
        }
        // fixed-order reduction keeps the update independent of the pool size
        let mut grad = net.zeros_like();
        for (_, g) in &per_sample {
            grad.axpy(T::from_f64(scale), g);
        }
        net.model.neck.add_reg_grad(&mut grad.model.neck)?;
        velocity.visit_mut("", &mut |_, v| v.data_mut().iter_mut().for_each(|x| *x = *x * mu));
        velocity.axpy(T::one(), &grad);
        net.axpy(-lr_t, &velocity);
        if !net.all_finite() {
            return Err(Error::Diverged { step, loss: f64::NAN });
        }
    }
    let initial_loss = history[0].loss;
    let final_loss = history.last().expect("at least one record").loss;
    let ratio = final_loss / initial_loss;
    Ok((
        TrainReport {
            arch: cfg.arch.name().to_string(),
            steps,
            lr,
            initial_loss,
            final_loss,
            ratio,
            converged: ratio < CONVERGENCE_RATIO,
            history,
        },
        net,
    ))
}

pub type NamedTensors = Vec<(String, Tensor<f64>)>;

/// [`train_toy_with`] at the configured precision; returns the report and
/// the trained parameters as named f64 tensors.
pub fn train_toy(cfg: &PyramidConfig, steps: usize, lr: f64) -> Result<(TrainReport, NamedTensors)> {
    fn named<T: Scalar>(net: &SegmentationNet<T>) -> Vec<(String, Tensor<f64>)> {
        net.named().into_iter().map(|(n, t)| (n, t.cast())).collect()
    }
    match cfg.dtype {
        DType::F32 => {
            let (r, net) = train_toy_with::<f32>(cfg, steps, lr)?;
            Ok((r, named(&net)))
        }
        DType::F64 => {
            let (r, net) = train_toy_with::<f64>(cfg, steps, lr)?;
            Ok((r, named(&net)))
        }
    }
}

/// Runs `f` on a dedicated pool of `threads` workers (the global pool when
/// `None`).
pub fn with_threads<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Worker count requested through `A2FPN_THREADS`, if any.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var("A2FPN_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| Error::Config(format!("A2FPN_THREADS must be a positive integer, got '{v}'"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_matches_closed_form() {
        let z = Tensor::<f64>::from_f64(&[3], &[0.0, 2.0, -1.0]).unwrap();
        let y = Tensor::<f64>::from_f64(&[3], &[1.0, 0.0, 1.0]).unwrap();
        let (l, g) = bce_with_logits(&z, &y).unwrap();
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let want = -(sig(0.0).ln() + (1.0 - sig(2.0)).ln() + sig(-1.0).ln()) / 3.0;
        assert!((l - want).abs() < 1e-14);
        assert!((g.data()[1] - sig(2.0) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn dataset_is_seeded_and_binary() {
        let a = synthetic_dataset::<f32>(3, 64, 64, 1);
        let b = synthetic_dataset::<f32>(3, 64, 64, 1);
        assert!(a.iter().zip(&b).all(|(x, y)| x.image == y.image && x.mask == y.mask));
        for s in &a {
            assert!(s.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
            let fg = s.mask.sum();
            assert!(fg > 0.0 && fg < 4096.0);
        }
    }
}

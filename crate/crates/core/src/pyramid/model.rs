use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::level::LevelFeature;
use crate::mgc::{orthogonal_reg_grad, orthogonal_reg_loss};
use crate::params::{join, ParamSet};
use crate::tensor::{Scalar, Tensor};

use super::a2fpn::{a2fpn_backward, forward_a2fpn_traced, A2fpnParams, A2fpnTrace};
use super::backbone::{toy_backbone_backward, toy_backbone_forward_traced, BackboneParams, BackboneTrace};
use super::baseline::{forward_fpn_traced, fpn_backward, FpnParams, FpnTrace};
use super::config::{Arch, PyramidConfig};

#[derive(Clone, Debug, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum NeckParams<T> {
    Fpn(FpnParams<T>),
    A2fpn(A2fpnParams<T>),
}

impl<T: Scalar> NeckParams<T> {
    pub fn init<R: rand::Rng + ?Sized>(cfg: &PyramidConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        Ok(match cfg.arch {
            Arch::Fpn | Arch::Pafpn => NeckParams::Fpn(FpnParams::init(
                &cfg.backbone.channels,
                cfg.c,
                cfg.arch == Arch::Pafpn,
                rng,
            )),
            Arch::A2fpn | Arch::A2fpnLite => NeckParams::A2fpn(A2fpnParams::init(cfg, rng)?),
        })
    }

    /// Orthogonality penalty of the context collectors (zero for FPN necks).
    pub fn reg_loss(&self) -> f64 {
        match self {
            NeckParams::A2fpn(p) => orthogonal_reg_loss(&p.mgc),
            NeckParams::Fpn(_) => 0.0,
        }
    }

    /// Adds the penalty gradient into `grads`.
    pub fn add_reg_grad(&self, grads: &mut Self) -> Result<()> {
        if let (NeckParams::A2fpn(p), NeckParams::A2fpn(g)) = (self, grads) {
            let rg = orthogonal_reg_grad(&p.mgc)?;
            g.mgc.axpy(T::one(), &rg);
        }
        Ok(())
    }
}

impl<T: Scalar> ParamSet<T> for NeckParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        match self {
            NeckParams::Fpn(p) => p.visit(prefix, f),
            NeckParams::A2fpn(p) => p.visit(prefix, f),
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        match self {
            NeckParams::Fpn(p) => p.visit_mut(prefix, f),
            NeckParams::A2fpn(p) => p.visit_mut(prefix, f),
        }
    }
}

#[derive(Clone, Debug)]
pub enum NeckTrace<T> {
    Fpn(FpnTrace<T>),
    A2fpn(Box<A2fpnTrace<T>>),
}

/// Runs any neck over backbone levels 2–5.
pub fn forward_neck_traced<T: Scalar>(
    levels: &[LevelFeature<T>],
    neck: &NeckParams<T>,
) -> Result<(Vec<LevelFeature<T>>, NeckTrace<T>)> {
    Ok(match neck {
        NeckParams::Fpn(p) => {
            let (o, t) = forward_fpn_traced(levels, p)?;
            (o, NeckTrace::Fpn(t))
        }
        NeckParams::A2fpn(p) => {
            let (o, t) = forward_a2fpn_traced(levels, p)?;
            (o, NeckTrace::A2fpn(Box::new(t)))
        }
    })
}

pub fn neck_backward<T: Scalar>(
    neck: &NeckParams<T>,
    trace: &NeckTrace<T>,
    g_outputs: &[Tensor<T>],
) -> Result<(Vec<Tensor<T>>, NeckParams<T>)> {
    match (neck, trace) {
        (NeckParams::Fpn(p), NeckTrace::Fpn(t)) => {
            let (g, gp) = fpn_backward(p, t, g_outputs)?;
            Ok((g, NeckParams::Fpn(gp)))
        }
        (NeckParams::A2fpn(p), NeckTrace::A2fpn(t)) => {
            let (g, gp) = a2fpn_backward(p, t, g_outputs)?;
            Ok((g, NeckParams::A2fpn(gp)))
        }
        _ => Err(crate::error::Error::Config("trace does not belong to this neck".into())),
    }
}

/// Toy backbone plus neck.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidModel<T> {
    pub backbone: BackboneParams<T>,
    pub neck: NeckParams<T>,
}

#[derive(Clone, Debug)]
pub struct ModelTrace<T> {
    backbone: BackboneTrace<T>,
    neck: NeckTrace<T>,
}

impl<T: Scalar> PyramidModel<T> {
    /// Deterministic initialization from `cfg.seed`.
    pub fn init(cfg: &PyramidConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Self::init_with(cfg, &mut rng)
    }

    pub fn init_with<R: rand::Rng + ?Sized>(cfg: &PyramidConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let backbone = BackboneParams::init(&cfg.backbone, rng);
        let neck = NeckParams::init(cfg, rng)?;
        Ok(Self { backbone, neck })
    }

    pub fn forward(&self, image: &Tensor<T>) -> Result<Vec<LevelFeature<T>>> {
        Ok(self.forward_traced(image)?.0)
    }

    pub fn forward_traced(&self, image: &Tensor<T>) -> Result<(Vec<LevelFeature<T>>, ModelTrace<T>)> {
        let (levels, backbone) = toy_backbone_forward_traced(image, &self.backbone)?;
        let (out, neck) = forward_neck_traced(&levels, &self.neck)?;
        Ok((out, ModelTrace { backbone, neck }))
    }

    /// Image adjoint and parameter gradients for the given output adjoints.
    pub fn backward(&self, trace: &ModelTrace<T>, g_outputs: &[Tensor<T>]) -> Result<(Tensor<T>, Self)> {
        let (g_levels, neck) = neck_backward(&self.neck, &trace.neck, g_outputs)?;
        let (g_image, backbone) = toy_backbone_backward(&self.backbone, &trace.backbone, &g_levels)?;
        Ok((g_image, Self { backbone, neck }))
    }
}

impl<T: Scalar> ParamSet<T> for PyramidModel<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        self.neck.visit(prefix, f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.backbone.visit_mut(&join(prefix, "backbone"), f);
        self.neck.visit_mut(prefix, f);
    }
}

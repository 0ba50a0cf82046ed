//! Complete necks over a toy backbone: FPN, PAFPN, A²-FPN and its Lite
//! variant, plus the synthetic training task.

mod a2fpn;
mod backbone;
mod baseline;
mod config;
mod model;
pub mod train;

pub use a2fpn::{a2fpn_backward, describe_topology, forward_a2fpn, forward_a2fpn_traced, A2fpnParams, A2fpnTrace};
pub use backbone::{
    make_extra_level, toy_backbone_backward, toy_backbone_forward, toy_backbone_forward_traced, BackboneParams,
    BackboneTrace,
};
pub use baseline::{
    forward_fpn, forward_fpn_traced, forward_pafpn, fpn_backward, FpnParams, FpnTrace, PathAggregationParams,
};
pub use config::{Arch, BackboneSpec, Profile, PyramidConfig, TrainConfig};
pub use model::{forward_neck_traced, neck_backward, ModelTrace, NeckParams, NeckTrace, PyramidModel};

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fusion::{FusionSpec, GateAct};
use crate::tensor::DType;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Fpn,
    Pafpn,
    A2fpn,
    A2fpnLite,
}

impl Arch {
    pub const ALL: [Arch; 4] = [Arch::Fpn, Arch::Pafpn, Arch::A2fpn, Arch::A2fpnLite];

    pub fn name(self) -> &'static str {
        match self {
            Arch::Fpn => "fpn",
            Arch::Pafpn => "pafpn",
            Arch::A2fpn => "a2fpn",
            Arch::A2fpnLite => "a2fpn_lite",
        }
    }

    pub fn is_attention(self) -> bool {
        matches!(self, Arch::A2fpn | Arch::A2fpnLite)
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown arch '{s}' (expected fpn, pafpn, a2fpn or a2fpn_lite)")))
    }
}

/// Channel widths of the four backbone stages at strides 4, 8, 16, 32.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub channels: [usize; 4],
}

impl BackboneSpec {
    pub const STRIDES: [usize; 4] = [4, 8, 16, 32];

    pub fn toy() -> Self {
        Self {
            channels: [32, 64, 128, 256],
        }
    }

    /// Stage widths of a ResNet-50/101 trunk.
    pub fn resnet() -> Self {
        Self {
            channels: [256, 512, 1024, 2048],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) {
            return Err(Error::Config(format!(
                "backbone widths must be positive: {:?}",
                self.channels
            )));
        }
        Ok(())
    }
}

impl FromStr for BackboneSpec {
    type Err = Error;

    /// `toy`, `resnet`, or four comma-separated widths.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Self::toy()),
            "resnet" | "resnet50" | "resnet101" => Ok(Self::resnet()),
            _ => {
                let parts: Vec<usize> = s
                    .split(',')
                    .map(|p| p.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::Config(format!("backbone spec '{s}': {e}")))?;
                let channels: [usize; 4] = parts
                    .try_into()
                    .map_err(|_| Error::Config(format!("backbone spec '{s}' needs four widths")))?;
                let spec = Self { channels };
                spec.validate()?;
                Ok(spec)
            }
        }
    }
}

/// Optimizer and data settings of the synthetic training task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub images: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 0.002,
            momentum: 0.9,
            images: 8,
        }
    }
}

/// Fully resolved model configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PyramidConfig {
    pub arch: Arch,
    /// Pyramid channel width.
    pub c: usize,
    /// Context-count coefficient: level `i` collects `a·(6−i)` contexts.
    pub a: usize,
    pub k_up: usize,
    pub k_dn: usize,
    pub k_en: usize,
    pub c_m: usize,
    pub gate_act: GateAct,
    /// Predict reassembly kernels from both neighbours.
    pub use_concat_guidance: bool,
    /// Learn channel gates at every fusion site; off pins them to 1.
    pub use_channel_gates: bool,
    pub collect_levels: Vec<usize>,
    pub lambda_o: f64,
    /// Build the stride-64 level with a strided conv (off: max-pool the
    /// stride-32 output).
    pub extra_level_conv: bool,
    /// 3×3 conv applied to the finest top-down output before it seeds the
    /// bottom-up path.
    pub seed_smooth: bool,
    pub backbone: BackboneSpec,
    /// Input `(height, width)`.
    pub image_size: (usize, usize),
    pub seed: u64,
    pub dtype: DType,
    pub train: TrainConfig,
}

impl PyramidConfig {
    /// Published hyper-parameters of each architecture.
    pub fn preset(arch: Arch) -> Self {
        let lite = arch == Arch::A2fpnLite;
        Self {
            arch,
            c: if lite { 128 } else { 256 },
            a: if lite { 32 } else { 64 },
            k_up: 5,
            k_dn: 5,
            k_en: 3,
            c_m: 64,
            gate_act: GateAct::TwoSigmoid,
            use_concat_guidance: true,
            use_channel_gates: true,
            collect_levels: vec![2, 3, 4, 5],
            lambda_o: 1e-4,
            extra_level_conv: !lite,
            seed_smooth: !lite,
            backbone: BackboneSpec::toy(),
            image_size: (256, 256),
            seed: 0,
            dtype: DType::F32,
            train: TrainConfig::default(),
        }
    }

    /// Desk-scale variant used for training and gradient checks: same
    /// topology, narrow widths, 64×64 inputs. The Lite variant keeps its
    /// halved width and context counts.
    pub fn toy(arch: Arch) -> Self {
        let lite = arch == Arch::A2fpnLite;
        Self {
            c: if lite { 8 } else { 16 },
            a: if lite { 2 } else { 4 },
            c_m: 8,
            backbone: BackboneSpec {
                channels: [8, 16, 32, 64],
            },
            image_size: (64, 64),
            ..Self::preset(arch)
        }
    }

    /// Context counts for the collected levels.
    pub fn contexts(&self) -> Vec<usize> {
        self.collect_levels.iter().map(|&i| self.a * (6 - i)).collect()
    }

    /// Highest pyramid level the MGC module distributes to.
    pub fn top_level(&self) -> usize {
        if self.extra_level_conv {
            6
        } else {
            5
        }
    }

    pub fn fusion_spec(&self, up: bool) -> FusionSpec {
        FusionSpec {
            channels: self.c,
            kernel_size: if up { self.k_up } else { self.k_dn },
            encoder_kernel: self.k_en,
            compressed: self.c_m,
            gate_act: self.gate_act,
            guided: self.use_concat_guidance,
            gated: self.use_channel_gates,
            smooth: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.c == 0 || !self.c.is_multiple_of(4) {
            return bad(format!("c = {} must be a positive multiple of 4", self.c));
        }
        let (h, w) = self.image_size;
        if h == 0 || w == 0 || h % 64 != 0 || w % 64 != 0 {
            return bad(format!("image size {h}x{w} must be positive multiples of 64"));
        }
        for (name, k) in [("k_up", self.k_up), ("k_dn", self.k_dn), ("k_en", self.k_en)] {
            if k % 2 == 0 {
                return bad(format!("{name} = {k} must be odd"));
            }
        }
        if self.c_m == 0 {
            return bad("c_m must be positive".into());
        }
        if self.arch.is_attention() {
            let expect: Vec<usize> = (2..2 + self.collect_levels.len()).collect();
            if self.collect_levels.is_empty() || self.collect_levels != expect || self.collect_levels.len() > 4 {
                return bad(format!(
                    "collect_levels {:?} must be a consecutive run starting at level 2 within 2..=5",
                    self.collect_levels
                ));
            }
            if self.a == 0 {
                return bad("a must be positive".into());
            }
        }
        if self.lambda_o < 0.0 {
            return bad(format!("lambda_o = {} must be non-negative", self.lambda_o));
        }
        self.backbone.validate()
    }

    /// Parses a TOML document layered over the selected preset. Missing
    /// keys keep preset values.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: ConfigFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        file.resolve()
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Canonical TOML rendering of the resolved config.
    pub fn to_toml(&self) -> String {
        toml::to_string(&ConfigFile::from(self)).expect("config serializes")
    }

    /// SHA-256 of the canonical rendering, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    #[default]
    Full,
    Toy,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    arch: Option<Arch>,
    profile: Option<Profile>,
    c: Option<usize>,
    a: Option<usize>,
    k_up: Option<usize>,
    k_dn: Option<usize>,
    k_en: Option<usize>,
    c_m: Option<usize>,
    gate_act: Option<GateAct>,
    use_concat_guidance: Option<bool>,
    use_channel_gates: Option<bool>,
    collect_levels: Option<Vec<usize>>,
    lambda_o: Option<f64>,
    extra_level_conv: Option<bool>,
    seed_smooth: Option<bool>,
    backbone: Option<[usize; 4]>,
    image_size: Option<[usize; 2]>,
    seed: Option<u64>,
    dtype: Option<DType>,
    train: Option<TrainFile>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    steps: Option<usize>,
    lr: Option<f64>,
    momentum: Option<f64>,
    images: Option<usize>,
}

impl ConfigFile {
    fn resolve(self) -> Result<PyramidConfig> {
        let arch = self.arch.unwrap_or(Arch::A2fpn);
        let mut cfg = match self.profile.unwrap_or_default() {
            Profile::Full => PyramidConfig::preset(arch),
            Profile::Toy => PyramidConfig::toy(arch),
        };
        macro_rules! layer {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { cfg.$f = v; })* };
        }
        layer!(
            c,
            a,
            k_up,
            k_dn,
            k_en,
            c_m,
            gate_act,
            use_concat_guidance,
            use_channel_gates
        );
        layer!(collect_levels, lambda_o, extra_level_conv, seed_smooth, seed, dtype);
        if let Some(b) = self.backbone {
            cfg.backbone = BackboneSpec { channels: b };
        }
        if let Some([h, w]) = self.image_size {
            cfg.image_size = (h, w);
        }
        if let Some(t) = self.train {
            let tc = &mut cfg.train;
            if let Some(v) = t.steps {
                tc.steps = v;
            }
            if let Some(v) = t.lr {
                tc.lr = v;
            }
            if let Some(v) = t.momentum {
                tc.momentum = v;
            }
            if let Some(v) = t.images {
                tc.images = v;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl From<&PyramidConfig> for ConfigFile {
    fn from(c: &PyramidConfig) -> Self {
        Self {
            arch: Some(c.arch),
            profile: None,
            c: Some(c.c),
            a: Some(c.a),
            k_up: Some(c.k_up),
            k_dn: Some(c.k_dn),
            k_en: Some(c.k_en),
            c_m: Some(c.c_m),
            gate_act: Some(c.gate_act),
            use_concat_guidance: Some(c.use_concat_guidance),
            use_channel_gates: Some(c.use_channel_gates),
            collect_levels: Some(c.collect_levels.clone()),
            lambda_o: Some(c.lambda_o),
            extra_level_conv: Some(c.extra_level_conv),
            seed_smooth: Some(c.seed_smooth),
            backbone: Some(c.backbone.channels),
            image_size: Some([c.image_size.0, c.image_size.1]),
            seed: Some(c.seed),
            dtype: Some(c.dtype),
            train: Some(TrainFile {
                steps: Some(c.train.steps),
                lr: Some(c.train.lr),
                momentum: Some(c.train.momentum),
                images: Some(c.train.images),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        let full = PyramidConfig::preset(Arch::A2fpn);
        assert_eq!(full.contexts(), vec![256, 192, 128, 64]);
        assert_eq!(full.contexts().iter().sum::<usize>(), 640);
        let lite = PyramidConfig::preset(Arch::A2fpnLite);
        assert_eq!(lite.c, 128);
        assert_eq!(lite.contexts(), vec![128, 96, 64, 32]);
        assert!(!lite.extra_level_conv && !lite.seed_smooth);
    }

    #[test]
    fn layering_and_round_trip() {
        let cfg =
            PyramidConfig::from_toml_str("arch = \"a2fpn_lite\"\nprofile = \"toy\"\nseed = 7\n[train]\nsteps = 3\n")
                .unwrap();
        assert_eq!(cfg.c, 8);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.steps, 3);
        assert_eq!(cfg.train.lr, TrainConfig::default().lr);
        let again = PyramidConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.digest(), cfg.digest());
    }

    #[test]
    fn rejects_bad_values() {
        assert!(PyramidConfig::from_toml_str("c = 6").is_err());
        assert!(PyramidConfig::from_toml_str("image_size = [100, 64]").is_err());
        assert!(PyramidConfig::from_toml_str("k_up = 4").is_err());
        assert!(PyramidConfig::from_toml_str("bogus = 1").is_err());
        assert!(PyramidConfig::from_toml_str("arch = \"unet\"").is_err());
    }

    #[test]
    fn backbone_spec_parsing() {
        assert_eq!("resnet".parse::<BackboneSpec>().unwrap(), BackboneSpec::resnet());
        assert_eq!("1,2,3,4".parse::<BackboneSpec>().unwrap().channels, [1, 2, 3, 4]);
        assert!("1,2,3".parse::<BackboneSpec>().is_err());
    }
}

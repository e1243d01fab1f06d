//! The assembled network and its ablation variants.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, Var};
use crate::backbone::{build_backbone, forward_backbone, BackboneConfig, BackboneOutputs};
use crate::contrast::{build_contrast, contrast_features, ContrastConfig, PYRAMID_SIGMAS_224};
use crate::error::{Error, Result};
use crate::fusion::{build_dense, build_direct, dense_combine, direct_combine, FusionLayout, LEVELS};
use crate::head::{
    build_fusion, build_prior, build_stack, centre_bias_map, fuse, readout, total_loss, FusionKind, LossTerms, KL_EPS,
};
use crate::layers::{Net, ParamBuilder};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Network variants, from raw low-level features only up to the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AblationMode {
    /// Raw F1/F2 combined directly, no contrast block.
    Ncf,
    /// Contrast F1/F2 combined directly.
    Cf,
    /// F3–F5 combined directly.
    Sf,
    /// All five levels concatenated at full size.
    Dcf,
    /// Dense wiring, reduction only, no prior.
    DenCf,
    /// Dense wiring with the centre-bias prior.
    DenCfCbp,
    /// Dense wiring, prior, and channel attention everywhere.
    Full,
}

impl AblationMode {
    pub const ALL: [AblationMode; 7] = [
        AblationMode::Ncf,
        AblationMode::Cf,
        AblationMode::Sf,
        AblationMode::Dcf,
        AblationMode::DenCf,
        AblationMode::DenCfCbp,
        AblationMode::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Ncf => "NCF",
            AblationMode::Cf => "CF",
            AblationMode::Sf => "SF",
            AblationMode::Dcf => "DCF",
            AblationMode::DenCf => "DenCF",
            AblationMode::DenCfCbp => "DenCF+CBP",
            AblationMode::Full => "full",
        }
    }

    pub fn dense(self) -> bool {
        matches!(self, AblationMode::DenCf | AblationMode::DenCfCbp | AblationMode::Full)
    }

    pub fn attention(self) -> bool {
        self == AblationMode::Full
    }

    pub fn prior(self) -> bool {
        matches!(self, AblationMode::DenCfCbp | AblationMode::Full)
    }

    pub fn uses_contrast(self) -> bool {
        !matches!(self, AblationMode::Ncf | AblationMode::Sf)
    }

    /// Levels (1-based) entering the direct wiring.
    pub fn direct_levels(self) -> &'static [usize] {
        match self {
            AblationMode::Ncf | AblationMode::Cf => &[1, 2],
            AblationMode::Sf => &[3, 4, 5],
            _ => &[1, 2, 3, 4, 5],
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL.into_iter().find(|m| m.name().eq_ignore_ascii_case(s)).ok_or_else(|| {
            Error::Config(format!("unknown mode `{s}` (expected one of NCF, CF, SF, DCF, DenCF, DenCF+CBP, full)"))
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Pyramid sigmas at a 224-pixel input; scaled with `base_size`.
    pub pyramid_sigmas: Vec<f64>,
    pub fuse_channels: usize,
    pub mode: AblationMode,
    pub fusion: FusionKind,
    pub kl_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let backbone = BackboneConfig::default();
        let fuse_channels = default_fuse_channels(backbone.width_factor);
        ModelConfig {
            backbone,
            pyramid_sigmas: PYRAMID_SIGMAS_224.to_vec(),
            fuse_channels,
            mode: AblationMode::Full,
            fusion: FusionKind::Network,
            kl_eps: KL_EPS,
        }
    }
}

/// `max(8, round(32 · width_factor))`.
pub fn default_fuse_channels(width_factor: f64) -> usize {
    ((32.0 * width_factor).round() as usize).max(8)
}

impl ModelConfig {
    /// Desk-scale configuration: the given base size and width factor with
    /// the matching default fused width.
    pub fn scaled(base_size: usize, width_factor: f64) -> Self {
        let mut cfg = ModelConfig::default();
        cfg.backbone.base_size = base_size;
        cfg.backbone.width_factor = width_factor;
        cfg.fuse_channels = default_fuse_channels(width_factor);
        cfg
    }

    pub fn contrast(&self, level: usize) -> ContrastConfig {
        let widths = self.backbone.widths();
        let k = self.backbone.base_size as f64 / 224.0;
        ContrastConfig { sigmas: self.pyramid_sigmas.iter().map(|s| s * k).collect(), out_channels: widths[level] }
    }

    pub fn layout(&self) -> FusionLayout {
        FusionLayout {
            in_channels: self.backbone.widths(),
            sizes: self.backbone.sizes(),
            channels: self.fuse_channels,
            attention: self.mode.attention(),
        }
    }

    pub fn branch_count(&self) -> usize {
        if self.mode.dense() {
            LEVELS
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.contrast(0).validate()?;
        if self.fuse_channels == 0 {
            return Err(Error::Config("fuse_channels must be >= 1".into()));
        }
        if !(self.kl_eps >= 0.0) {
            return Err(Error::Config("kl_eps must be >= 0".into()));
        }
        Ok(())
    }
}

/// Nodes produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    pub backbone: BackboneOutputs,
    /// Levels as they enter the fusion (contrast features for F1/F2 when used).
    pub levels: [Var; LEVELS],
    pub representations: Vec<Var>,
    /// Readout outputs before normalization.
    pub rough_raw: Vec<Var>,
    /// Normalized rough maps.
    pub rough: Vec<Var>,
    pub prior: Option<Var>,
    pub final_map: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

const HEAD_SEED_MIX: u64 = 0x9e37_79b9_7f4a_7c15;

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = build_backbone(&config.backbone, seed)?;
        let mut pb = ParamBuilder::new(seed ^ HEAD_SEED_MIX, config.backbone.init);
        let widths = config.backbone.widths();
        let mode = config.mode;
        if mode.uses_contrast() {
            build_contrast(&mut pb, "contrast.f1", widths[0], &config.contrast(0))?;
            build_contrast(&mut pb, "contrast.f2", widths[1], &config.contrast(1))?;
        }
        let layout = config.layout();
        if mode.dense() {
            build_dense(&mut pb, &layout)?;
        } else {
            build_direct(&mut pb, &layout, mode.direct_levels())?;
        }
        for j in 1..=config.branch_count() {
            build_stack(&mut pb, &format!("readout.g{j}"), config.fuse_channels, mode.attention())?;
        }
        if mode.prior() {
            build_prior(&mut pb, config.backbone.base_size)?;
        }
        let fusion_inputs = config.branch_count() + usize::from(mode.prior());
        build_fusion(&mut pb, fusion_inputs, config.fusion, mode.attention())?;
        params.extend(pb.finish())?;
        Ok(Model { config, params })
    }

    pub fn forward(&self, net: &Net, image: Var) -> Result<ForwardOutputs> {
        let g = net.g;
        let cfg = &self.config;
        let mode = cfg.mode;
        let backbone = forward_backbone(net, &cfg.backbone, image)?;
        let mut levels = backbone.as_array();
        if mode.uses_contrast() {
            levels[0] = contrast_features(net, "contrast.f1", backbone.f1_raw, &cfg.contrast(0))?;
            levels[1] = contrast_features(net, "contrast.f2", backbone.f2_raw, &cfg.contrast(1))?;
        }
        let layout = cfg.layout();
        let representations = if mode.dense() {
            dense_combine(net, levels, &layout)?.to_vec()
        } else {
            let feats: Vec<(usize, _)> = mode.direct_levels().iter().map(|&i| (i, levels[i - 1])).collect();
            vec![direct_combine(net, &feats, &layout)?]
        };
        let mut rough_raw = Vec::with_capacity(representations.len());
        let mut rough = Vec::with_capacity(representations.len());
        for (j, &gj) in representations.iter().enumerate() {
            let m = readout(net, &format!("readout.g{}", j + 1), gj)?;
            rough_raw.push(m);
            rough.push(g.normalize_maps(m));
        }
        let batch = g.dims(image)[0];
        let prior = if mode.prior() { Some(centre_bias_map(net, cfg.backbone.base_size, batch)?) } else { None };
        let final_map = fuse(net, &rough, prior, cfg.branch_count(), cfg.fusion)?;
        Ok(ForwardOutputs { backbone, levels, representations, rough_raw, rough, prior, final_map })
    }

    /// Objective for one forward pass; decay covers every parameter upstream
    /// of each rough map.
    pub fn loss(&self, g: &Graph, out: &ForwardOutputs, target: &Tensor, alpha: f64) -> Result<LossTerms> {
        let branch_params: Vec<Vec<Var>> = out.rough.iter().map(|&m| g.upstream_params(m)).collect();
        total_loss(g, &out.rough, out.final_map, target, alpha, &branch_params, self.config.kl_eps)
    }

    /// Final normalized attention maps `[B, 1, S, S]` for a batch of images.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let bound = self.params.bind(&g);
        let net = Net::new(&g, &bound);
        let x = g.constant(images.clone());
        let out = self.forward(&net, x)?;
        let map = g.value(out.final_map).clone();
        Ok(map)
    }
}

//! VGG16 convolutional trunk with a stride-1 fourth pool and a dilated fifth
//! block, returning the five block outputs.

use std::path::Path;

use crate::autodiff::{ConvSpec, Graph, Padding, Var};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::layers::{Net, ParamBuilder};
use crate::params::{InitScheme, ParamStore};
use crate::tensor::Tensor;

/// Canonical VGG16 block widths.
pub const VGG_WIDTHS: [usize; 5] = [64, 128, 256, 512, 512];
/// Convolutions per block.
pub const VGG_DEPTHS: [usize; 5] = [2, 2, 3, 3, 3];
/// ImageNet channel means subtracted from `[0, 1]` inputs.
pub const PIXEL_MEAN: [f64; 3] = [0.485, 0.456, 0.406];

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub base_size: usize,
    pub width_factor: f64,
    pub in_channels: usize,
    pub init: InitScheme,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { base_size: 224, width_factor: 1.0, in_channels: 3, init: InitScheme::Fixed(0.01) }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if ![64, 112, 224].contains(&self.base_size) {
            return Err(Error::Config(format!("base_size must be 64, 112 or 224, got {}", self.base_size)));
        }
        if !(self.width_factor > 0.0 && self.width_factor <= 1.0) {
            return Err(Error::Config(format!("width_factor must lie in (0, 1], got {}", self.width_factor)));
        }
        if self.in_channels != 3 {
            return Err(Error::Config("backbone expects 3 input channels".into()));
        }
        Ok(())
    }

    /// Channel width of each block after scaling.
    pub fn widths(&self) -> [usize; 5] {
        VGG_WIDTHS.map(|w| ((w as f64 * self.width_factor).round() as usize).max(1))
    }

    /// Spatial side of F1..F5.
    pub fn sizes(&self) -> [usize; 5] {
        let s = self.base_size;
        [s, s / 2, s / 4, s / 8, s / 8]
    }
}

/// Name prefix of convolution `layer` (1-based) in `block` (1-based).
pub fn conv_name(block: usize, layer: usize) -> String {
    format!("backbone.conv{block}_{layer}")
}

/// Creates the 13 convolutions of the trunk.
pub fn build_backbone(cfg: &BackboneConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut pb = ParamBuilder::new(seed, cfg.init);
    let widths = cfg.widths();
    let mut cin = cfg.in_channels;
    for (b, (&width, &depth)) in widths.iter().zip(&VGG_DEPTHS).enumerate() {
        for l in 0..depth {
            pb.conv(&conv_name(b + 1, l + 1), width, cin, 3, true)?;
            cin = width;
        }
    }
    Ok(pb.finish())
}

/// The five block outputs.
#[derive(Clone, Copy, Debug)]
pub struct BackboneOutputs {
    pub f1_raw: Var,
    pub f2_raw: Var,
    pub f3: Var,
    pub f4: Var,
    pub f5: Var,
}

impl BackboneOutputs {
    pub fn as_array(&self) -> [Var; 5] {
        [self.f1_raw, self.f2_raw, self.f3, self.f4, self.f5]
    }
}

/// Runs the trunk on `image` (`[B, 3, S, S]`, values in `[0, 1]`).
pub fn forward_backbone(net: &Net, cfg: &BackboneConfig, image: Var) -> Result<BackboneOutputs> {
    let g = net.g;
    let [_, c, h, w] = g.dims(image);
    if c != cfg.in_channels || h != cfg.base_size || w != cfg.base_size {
        return Err(Error::shape(
            "forward_backbone",
            format!(
                "image {:?} but backbone expects [_, {}, {}, {}]",
                g.dims(image),
                cfg.in_channels,
                cfg.base_size,
                cfg.base_size
            ),
        ));
    }
    let x = center_pixels(g, image)?;
    let mut x = x;
    let mut outs = Vec::with_capacity(5);
    for (b, &depth) in VGG_DEPTHS.iter().enumerate() {
        let spec = if b == 4 { ConvSpec::dilated(2) } else { ConvSpec::SAME };
        for l in 0..depth {
            x = net.conv_relu(&conv_name(b + 1, l + 1), x, spec)?;
        }
        outs.push(x);
        x = match b {
            0..=2 => g.max_pool2d(x, 2, 2, Padding::Valid)?,
            3 => g.max_pool2d(x, 2, 1, Padding::Same)?,
            _ => x,
        };
    }
    Ok(BackboneOutputs { f1_raw: outs[0], f2_raw: outs[1], f3: outs[2], f4: outs[3], f5: outs[4] })
}

fn center_pixels(g: &Graph, image: Var) -> Result<Var> {
    let dims = g.dims(image);
    let offset = Tensor::from_fn(dims, |_, c, _, _| -PIXEL_MEAN[c]);
    let offset = g.constant(offset);
    g.add(image, offset)
}

/// Overwrites backbone tensors with those stored in a checkpoint file.
///
/// Blocks 1-4 must all be present; block 5 is imported only when present.
/// Any tensor in the file that is not a backbone parameter, or whose dims
/// differ, rejects the whole import.
pub fn import_pretrained(params: &mut ParamStore, cfg: &BackboneConfig, file: &Path) -> Result<()> {
    if cfg.width_factor != 1.0 {
        return Err(Error::Invalid(format!("pretrained import needs width_factor 1, got {}", cfg.width_factor)));
    }
    let loaded = checkpoint::load_checkpoint(file)?;
    import_from_store(params, &loaded)
}

pub(crate) fn import_from_store(params: &mut ParamStore, loaded: &ParamStore) -> Result<()> {
    let mut offending = Vec::new();
    for (name, t) in loaded.iter() {
        match params.get(name) {
            Some(own) if name.starts_with("backbone.") && own.dims() == t.dims() => {}
            Some(own) if name.starts_with("backbone.") => {
                offending.push(format!("{name} (file {:?}, model {:?})", t.dims(), own.dims()))
            }
            _ => offending.push(format!("{name} (not a backbone parameter)")),
        }
    }
    for (b, &depth) in VGG_DEPTHS.iter().enumerate().take(4) {
        for l in 0..depth {
            for suffix in ["weight", "bias"] {
                let name = format!("{}.{suffix}", conv_name(b + 1, l + 1));
                if !loaded.contains(&name) {
                    offending.push(format!("{name} (missing)"));
                }
            }
        }
    }
    if !offending.is_empty() {
        return Err(Error::Checkpoint(format!("pretrained import rejected: {}", offending.join(", "))));
    }
    for (name, t) in loaded.iter() {
        params.assign(name, t)?;
    }
    Ok(())
}

//! Contrast feature extraction: intensity map, five-level Gaussian pyramid,
//! squared centre-surround residuals, and a learned 1×1 merge of residuals
//! and pyramid.

use crate::autodiff::{ConvSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::gaussian::{BorderMode, GaussianBlur};
use crate::layers::{Net, ParamBuilder};

/// Pyramid standard deviations, in pixels at a 224-pixel input.
pub const PYRAMID_SIGMAS_224: [f64; 5] = [5.0, 10.0, 20.0, 40.0, 80.0];

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastConfig {
    pub sigmas: Vec<f64>,
    pub out_channels: usize,
}

impl ContrastConfig {
    /// Sigmas scaled linearly from the 224-pixel values.
    pub fn for_base(base_size: usize, out_channels: usize) -> Self {
        let k = base_size as f64 / 224.0;
        ContrastConfig { sigmas: PYRAMID_SIGMAS_224.iter().map(|s| s * k).collect(), out_channels }
    }

    pub fn levels(&self) -> usize {
        self.sigmas.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigmas.len() != 5 {
            return Err(Error::Config(format!("need 5 pyramid sigmas, got {}", self.sigmas.len())));
        }
        if self.sigmas.iter().any(|s| !(*s > 0.0)) || self.sigmas.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!(
                "pyramid sigmas must be positive and strictly increasing: {:?}",
                self.sigmas
            )));
        }
        if self.out_channels == 0 {
            return Err(Error::Config("contrast out_channels must be >= 1".into()));
        }
        Ok(())
    }
}

/// Adds `{name}.merge_residual` (`[C'', L·C1]`) and `{name}.merge_pyramid`
/// (`[C'', L]`), both 1×1 and bias-free.
pub fn build_contrast(pb: &mut ParamBuilder, name: &str, in_channels: usize, cfg: &ContrastConfig) -> Result<()> {
    cfg.validate()?;
    let l = cfg.levels();
    pb.conv(&format!("{name}.merge_residual"), cfg.out_channels, l * in_channels, 1, false)?;
    pb.conv(&format!("{name}.merge_pyramid"), cfg.out_channels, l, 1, false)?;
    Ok(())
}

/// Channel-wise mean of `o`.
pub fn intensity_map(g: &Graph, o: Var) -> Var {
    g.channel_mean(o)
}

/// `[B, L, H, W]`: the intensity map filtered at each sigma. Taps outside the
/// map are dropped and the rest renormalized, so flat regions stay flat up to
/// the border.
pub fn gaussian_pyramid(g: &Graph, intensity: Var, cfg: &ContrastConfig) -> Result<Var> {
    let levels = cfg
        .sigmas
        .iter()
        .map(|&s| Ok(g.blur(intensity, &GaussianBlur::new(s, BorderMode::Renormalized)?)))
        .collect::<Result<Vec<_>>>()?;
    g.concat_channels(&levels)
}

/// Intermediate tensors of one contrast block evaluation.
#[derive(Clone, Copy, Debug)]
pub struct ContrastParts {
    pub pyramid: Var,
    pub residuals: Var,
    pub residual_term: Var,
    pub pyramid_term: Var,
    pub output: Var,
}

pub fn contrast_parts(net: &Net, name: &str, o: Var, cfg: &ContrastConfig) -> Result<ContrastParts> {
    let g = net.g;
    let intensity = intensity_map(g, o);
    let pyramid = gaussian_pyramid(g, intensity, cfg)?;
    let residuals = g.squared_residuals(o, pyramid)?;
    let residual_term = net.conv(&format!("{name}.merge_residual"), residuals, ConvSpec::SAME)?;
    let pyramid_term = net.conv(&format!("{name}.merge_pyramid"), pyramid, ConvSpec::SAME)?;
    let output = g.add(residual_term, pyramid_term)?;
    Ok(ContrastParts { pyramid, residuals, residual_term, pyramid_term, output })
}

/// Contrast features `[B, C'', H, W]` of the raw feature `o`.
pub fn contrast_features(net: &Net, name: &str, o: Var, cfg: &ContrastConfig) -> Result<Var> {
    Ok(contrast_parts(net, name, o, cfg)?.output)
}

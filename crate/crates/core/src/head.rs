//! Readouts, centre-bias prior, weighted fusion and the training objective.

use crate::attention::{build_reduction_attention, reduction_attention};
use crate::autodiff::{ConvSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::gaussian::{BorderMode, GaussianBlur};
use crate::layers::{Net, ParamBuilder};
use crate::tensor::Tensor;

/// Output channels of the three stacked blocks in a readout or fusion stack.
pub const STACK_WIDTHS: [usize; 3] = [32, 16, 1];
/// Side and sigma of the final smoothing kernel.
pub const FINAL_KERNEL_SIZE: usize = 7;
pub const FINAL_KERNEL_SIGMA: f64 = 1.5;
/// Guard inside the KL logarithm.
pub const KL_EPS: f64 = 1e-8;

/// How rough maps and the prior are merged.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionKind {
    /// Concatenate as channels and run three reduction blocks.
    Network,
    /// Plain sum followed by a single 1×1 convolution.
    Sum,
}

/// The last reduction starts with nonnegative weights: its inputs are
/// rectified, so the single output channel cannot begin dead.
pub fn build_stack(pb: &mut ParamBuilder, name: &str, cin: usize, attention: bool) -> Result<()> {
    let mut c = cin;
    for (k, &w) in STACK_WIDTHS.iter().enumerate() {
        build_reduction_attention(pb, &format!("{name}.ra{}", k + 1), c, w, attention)?;
        c = w;
    }
    pb.make_nonnegative(&format!("{name}.ra{}.reduce.weight", STACK_WIDTHS.len()))
}

fn stack(net: &Net, name: &str, x: Var) -> Result<Var> {
    let mut x = x;
    for k in 0..STACK_WIDTHS.len() {
        x = reduction_attention(net, &format!("{name}.ra{}", k + 1), x)?;
    }
    Ok(net.g.relu(x))
}

/// Rough (un-normalized, nonnegative) attention map of one representation.
pub fn readout(net: &Net, name: &str, g_j: Var) -> Result<Var> {
    stack(net, name, g_j)
}

/// Adds `prior.log_var_x` / `prior.log_var_y` initialized to a standard
/// deviation of `size / 4` pixels.
pub fn build_prior(pb: &mut ParamBuilder, size: usize) -> Result<()> {
    let lv = (2.0 * (size as f64 / 4.0).ln()).max(0.0);
    pb.constant("prior.log_var_x", Tensor::scalar(lv))?;
    pb.constant("prior.log_var_y", Tensor::scalar(lv))
}

/// `1/(2π σx σy) · exp(−(x−x0)²/2σx² − (y−y0)²/2σy²)` with the mean fixed at
/// the grid centre.
pub fn centre_bias_map(net: &Net, size: usize, batch: usize) -> Result<Var> {
    let lvx = net.param("prior.log_var_x")?;
    let lvy = net.param("prior.log_var_y")?;
    net.g.centre_bias(lvx, lvy, batch, size)
}

pub fn build_fusion(pb: &mut ParamBuilder, inputs: usize, kind: FusionKind, attention: bool) -> Result<()> {
    match kind {
        FusionKind::Network => build_stack(pb, "fusion", inputs, attention),
        FusionKind::Sum => {
            pb.constant("fusion.k.weight", Tensor::full([1, 1, 1, 1], 1.0))?;
            pb.constant("fusion.k.bias", Tensor::zeros([1, 1, 1, 1]))
        }
    }
}

/// The final smoothing filter.
pub fn final_smoothing() -> GaussianBlur {
    GaussianBlur::sized(FINAL_KERNEL_SIGMA, FINAL_KERNEL_SIZE, BorderMode::Zero).expect("valid constants")
}

/// Fuses normalized rough maps (and the prior, if any) into the final
/// normalized map. Inputs are rescaled to unit mean before fusion.
pub fn fuse(net: &Net, rough: &[Var], prior: Option<Var>, expected: usize, kind: FusionKind) -> Result<Var> {
    if rough.len() != expected {
        return Err(Error::Invalid(format!("fusion expects {expected} rough maps, got {}", rough.len())));
    }
    let g = net.g;
    let mut maps: Vec<Var> = rough.to_vec();
    maps.extend(prior);
    let dims = g.dims(maps[0]);
    for &m in &maps {
        if g.dims(m) != dims || dims[1] != 1 {
            return Err(Error::shape("fuse", format!("{dims:?} vs {:?}", g.dims(m))));
        }
    }
    let pixels = (dims[2] * dims[3]) as f64;
    let scaled: Vec<Var> = maps.iter().map(|&m| g.scale_const(m, pixels)).collect();
    let fused = match kind {
        FusionKind::Network => {
            let cat = g.concat_channels(&scaled)?;
            stack(net, "fusion", cat)?
        }
        FusionKind::Sum => {
            let sum = g.add_all(&scaled)?;
            let k = net.conv("fusion.k", sum, ConvSpec::SAME)?;
            g.relu(k)
        }
    };
    let smooth = g.blur(fused, &final_smoothing());
    Ok(g.normalize_maps(smooth))
}

/// KL objective between a normalized prediction and the target density.
pub fn kl_loss(g: &Graph, m: Var, target: &Tensor, eps: f64) -> Result<Var> {
    g.kl_div(m, target, eps)
}

/// Loss components of one evaluation.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub rough_kl: Vec<Var>,
    pub final_kl: Var,
    pub decay: Vec<Var>,
}

/// `Σ_j [KL(M_j) + α Σ_{W ∈ branch j} W²] + KL(M_final)`.
pub fn total_loss(
    g: &Graph,
    rough: &[Var],
    final_map: Var,
    target: &Tensor,
    alpha: f64,
    branch_params: &[Vec<Var>],
    eps: f64,
) -> Result<LossTerms> {
    if branch_params.len() != rough.len() {
        return Err(Error::Invalid("one parameter set per rough map required".into()));
    }
    let mut terms = Vec::new();
    let mut rough_kl = Vec::new();
    let mut decay = Vec::new();
    for (&m, params) in rough.iter().zip(branch_params) {
        let kl = kl_loss(g, m, target, eps)?;
        rough_kl.push(kl);
        terms.push(kl);
        if alpha != 0.0 && !params.is_empty() {
            let squares: Vec<Var> = params.iter().map(|&p| g.sum_squares(p)).collect();
            let d = g.scale_const(g.add_all(&squares)?, alpha);
            decay.push(d);
            terms.push(d);
        }
    }
    let final_kl = kl_loss(g, final_map, target, eps)?;
    terms.push(final_kl);
    Ok(LossTerms { total: g.add_all(&terms)?, rough_kl, final_kl, decay })
}

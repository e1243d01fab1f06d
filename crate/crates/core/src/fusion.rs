//! Multi-scale combination of the five feature levels.
//!
//! The dense wiring produces one representation per level:
//!
//! * `G5 = A³(F5)`
//! * `G1 = RA(Σ_{i=1..4} w¹ᵢ R_i^{i-1} + R_5^3)`
//! * `Gj = A^{j-1}(Σ_{i=j..4} wʲᵢ R_i^{i-j} + R_5^{4-j})` for `j = 2..4`
//!
//! where `R_i^n` is level `i` after its own reduction block and `n`
//! upsampling stages `A` (nearest ×2, 3×3 convolution, reduction block). The
//! fifth level shares the fourth level's scale, hence the `4-j` exponent.
//!
//! The direct wiring used by the ablation modes upsamples each selected level
//! to full size, concatenates, and reduces to one representation.

use crate::attention::{build_reduction_attention, reduction_attention};
use crate::autodiff::{ConvSpec, Var};
use crate::error::{Error, Result};
use crate::layers::{Net, ParamBuilder};
use crate::tensor::Tensor;

/// Number of feature levels.
pub const LEVELS: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct FusionLayout {
    /// Channels of F1..F5 as they enter the fusion.
    pub in_channels: [usize; LEVELS],
    /// Side of F1..F5.
    pub sizes: [usize; LEVELS],
    /// Common channel width of every fused term and of each G_j.
    pub channels: usize,
    /// Whether reduction blocks carry channel attention.
    pub attention: bool,
}

/// Name of the scalar weight of the connection from level `i` to branch `j`.
pub fn weight_name(j: usize, i: usize) -> String {
    format!("fuse.w{j}_{i}")
}

/// Levels `i` contributing a weighted term to branch `j` (1-based).
pub fn weighted_levels(j: usize) -> std::ops::RangeInclusive<usize> {
    // Empty for the last branch.
    j.min(LEVELS)..=LEVELS - 1
}

/// Upsampling stages applied to level `i` before it joins branch `j`.
fn term_stages(j: usize, i: usize) -> usize {
    if i == LEVELS {
        LEVELS - 1 - j
    } else {
        i - j
    }
}

/// Upsampling stages applied after the sum of branch `j`.
fn post_stages(j: usize) -> usize {
    match j {
        1 => 0,
        j if j == LEVELS => LEVELS - 2,
        j => j - 1,
    }
}

pub fn build_tandem(pb: &mut ParamBuilder, name: &str, channels: usize, count: usize, attention: bool) -> Result<()> {
    for k in 0..count {
        pb.conv(&format!("{name}.up{k}.conv"), channels, channels, 3, true)?;
        build_reduction_attention(pb, &format!("{name}.up{k}.ra"), channels, channels, attention)?;
    }
    Ok(())
}

/// Nearest-neighbour ×2 followed by the 3×3 convolution `{name}`.
pub fn resize_conv(net: &Net, name: &str, x: Var) -> Result<Var> {
    let up = net.g.nearest_resize(x, 2)?;
    net.conv(name, up, ConvSpec::SAME)
}

/// `count` rounds of resize-convolution plus reduction block; 0 is identity.
pub fn tandem(net: &Net, name: &str, x: Var, count: usize) -> Result<Var> {
    let mut x = x;
    for k in 0..count {
        x = resize_conv(net, &format!("{name}.up{k}.conv"), x)?;
        x = reduction_attention(net, &format!("{name}.up{k}.ra"), x)?;
    }
    Ok(x)
}

fn term_name(j: usize, i: usize) -> String {
    format!("fuse.g{j}.f{i}")
}

/// Parameters of the dense wiring.
pub fn build_dense(pb: &mut ParamBuilder, layout: &FusionLayout) -> Result<()> {
    let c = layout.channels;
    let att = layout.attention;
    for j in 1..=LEVELS {
        let mut levels: Vec<usize> = weighted_levels(j).collect();
        levels.push(LEVELS);
        for &i in &levels {
            let name = term_name(j, i);
            build_reduction_attention(pb, &format!("{name}.in"), layout.in_channels[i - 1], c, att)?;
            let stages = if j == LEVELS { post_stages(j) } else { term_stages(j, i) };
            build_tandem(pb, &name, c, stages, att)?;
            if i < LEVELS {
                pb.constant(&weight_name(j, i), Tensor::scalar(1.0))?;
            }
        }
        if j == 1 {
            build_reduction_attention(pb, "fuse.g1.post", c, c, att)?;
        } else if j < LEVELS {
            build_tandem(pb, &format!("fuse.g{j}.post"), c, post_stages(j), att)?;
        }
    }
    Ok(())
}

fn check_layout(net: &Net, feats: &[Var], layout: &FusionLayout) -> Result<()> {
    for (k, &f) in feats.iter().enumerate() {
        let [_, c, h, w] = net.g.dims(f);
        if c != layout.in_channels[k] || h != layout.sizes[k] || w != layout.sizes[k] {
            return Err(Error::shape(
                "dense_combine",
                format!(
                    "F{} is {:?}, expected {} channels at {}×{}",
                    k + 1,
                    net.g.dims(f),
                    layout.in_channels[k],
                    layout.sizes[k],
                    layout.sizes[k]
                ),
            ));
        }
    }
    Ok(())
}

/// Level `i` prepared for branch `j`: its reduction block, then upsampling.
fn term(net: &Net, j: usize, i: usize, f: Var) -> Result<Var> {
    let name = term_name(j, i);
    let reduced = reduction_attention(net, &format!("{name}.in"), f)?;
    let stages = if j == LEVELS { post_stages(j) } else { term_stages(j, i) };
    tandem(net, &name, reduced, stages)
}

/// Dense combination of `[F1..F5]` into `[G1..G5]`, all at full size.
pub fn dense_combine(net: &Net, feats: [Var; LEVELS], layout: &FusionLayout) -> Result<[Var; LEVELS]> {
    check_layout(net, &feats, layout)?;
    let g = net.g;
    let mut out = Vec::with_capacity(LEVELS);
    for j in 1..=LEVELS {
        if j == LEVELS {
            out.push(term(net, j, LEVELS, feats[LEVELS - 1])?);
            continue;
        }
        let mut terms = Vec::new();
        for i in weighted_levels(j) {
            let r = term(net, j, i, feats[i - 1])?;
            terms.push(g.scale(r, net.param(&weight_name(j, i))?)?);
        }
        terms.push(term(net, j, LEVELS, feats[LEVELS - 1])?);
        let sum = g.add_all(&terms)?;
        let gj = if j == 1 {
            reduction_attention(net, "fuse.g1.post", sum)?
        } else {
            tandem(net, &format!("fuse.g{j}.post"), sum, post_stages(j))?
        };
        out.push(gj);
    }
    Ok(out.try_into().expect("five branches"))
}

/// Parameters of the direct wiring over the selected levels (1-based).
pub fn build_direct(pb: &mut ParamBuilder, layout: &FusionLayout, levels: &[usize]) -> Result<()> {
    let c = layout.channels;
    let full = layout.sizes[0];
    for &i in levels {
        let name = format!("direct.f{i}");
        build_reduction_attention(pb, &format!("{name}.in"), layout.in_channels[i - 1], c, layout.attention)?;
        build_tandem(pb, &name, c, stages_to(full, layout.sizes[i - 1]), layout.attention)?;
    }
    build_reduction_attention(pb, "direct.merge", c * levels.len(), c, layout.attention)?;
    Ok(())
}

fn stages_to(full: usize, size: usize) -> usize {
    (full / size).trailing_zeros() as usize
}

/// Direct combination: every selected level upsampled to full size,
/// concatenated, and reduced to a single representation.
pub fn direct_combine(net: &Net, feats: &[(usize, Var)], layout: &FusionLayout) -> Result<Var> {
    let full = layout.sizes[0];
    let mut ups = Vec::with_capacity(feats.len());
    for &(i, f) in feats {
        let [_, c, h, _] = net.g.dims(f);
        if c != layout.in_channels[i - 1] || h != layout.sizes[i - 1] {
            return Err(Error::shape("direct_combine", format!("F{i} is {:?}", net.g.dims(f))));
        }
        let name = format!("direct.f{i}");
        let r = reduction_attention(net, &format!("{name}.in"), f)?;
        ups.push(tandem(net, &name, r, stages_to(full, h))?);
    }
    let cat = net.g.concat_channels(&ups)?;
    reduction_attention(net, "direct.merge", cat)
}

//! Reduction-attention: a 1×1 channel reduction followed by sigmoid channel
//! weights computed from the spatially pooled reduced feature.

use crate::autodiff::{ConvSpec, Var};
use crate::error::{Error, Result};
use crate::layers::{Net, ParamBuilder};

/// Adds `{name}.reduce` (`[cout, cin]`, 1×1 with bias) and, with attention,
/// `{name}.fc` (`[cout, cout]` with bias).
pub fn build_reduction_attention(
    pb: &mut ParamBuilder,
    name: &str,
    cin: usize,
    cout: usize,
    attention: bool,
) -> Result<()> {
    pb.conv(&format!("{name}.reduce"), cout, cin, 1, true)?;
    if attention {
        pb.conv(&format!("{name}.fc"), cout, cout, 1, true)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionParts {
    /// relu of the 1×1 reduction.
    pub reduced: Var,
    /// Channel weights `[B, C', 1, 1]`, absent in reduction-only blocks.
    pub weights: Option<Var>,
    pub output: Var,
}

pub fn reduction_attention_parts(net: &Net, name: &str, x: Var) -> Result<AttentionParts> {
    let g = net.g;
    let reduce_name = format!("{name}.reduce");
    let kernel = net.param(&format!("{reduce_name}.weight"))?;
    let cin = g.dims(kernel)[1];
    let have = g.dims(x)[1];
    if have != cin {
        return Err(Error::shape(
            "reduction_attention",
            format!("`{name}` expects {cin} channels, input {:?}", g.dims(x)),
        ));
    }
    let reduced = net.conv_relu(&reduce_name, x, ConvSpec::SAME)?;
    let fc = format!("{name}.fc");
    if net.param(&format!("{fc}.weight")).is_err() {
        return Ok(AttentionParts { reduced, weights: None, output: reduced });
    }
    let descriptor = g.global_avg_pool(reduced);
    let logits = net.conv(&fc, descriptor, ConvSpec::SAME)?;
    let weights = g.sigmoid(logits);
    let output = g.channel_scale(reduced, weights)?;
    Ok(AttentionParts { reduced, weights: Some(weights), output })
}

/// `Ψ(a) ⊙ F'` with `F' = relu(reduce(x))` and `a = σ(fc(gap(F')))`.
pub fn reduction_attention(net: &Net, name: &str, x: Var) -> Result<Var> {
    Ok(reduction_attention_parts(net, name, x)?.output)
}

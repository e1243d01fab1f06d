//! Windowed max pooling with argmax routing.

use crate::error::{Error, Result};
use crate::tensor::Dims;

use super::conv::Padding;

/// Output dims plus, per output element, the flat input index of its maximum.
pub(crate) struct PoolResult {
    pub dims: Dims,
    pub values: Vec<f64>,
    pub argmax: Vec<usize>,
    /// Smallest gap between a window's maximum and its runner-up.
    pub margin: f64,
}

fn extent(len: usize, window: usize, stride: usize, padding: Padding) -> Option<(usize, usize)> {
    match padding {
        Padding::Valid => (window <= len).then(|| ((len - window) / stride + 1, 0)),
        Padding::Same => {
            let out = len.div_ceil(stride);
            let total = ((out - 1) * stride + window).saturating_sub(len);
            // TF convention: the smaller half of the border goes first.
            (window <= len + total).then_some((out, total / 2))
        }
    }
}

pub(crate) fn max_pool(dims: Dims, x: &[f64], window: usize, stride: usize, padding: Padding) -> Result<PoolResult> {
    if window == 0 || stride == 0 {
        return Err(Error::Invalid("max_pool2d window and stride must be >= 1".into()));
    }
    let [b, c, h, w] = dims;
    let too_big = || Error::shape("max_pool2d", format!("window {window} exceeds padded extent of {dims:?}"));
    let (oh, pt) = extent(h, window, stride, padding).ok_or_else(too_big)?;
    let (ow, pl) = extent(w, window, stride, padding).ok_or_else(too_big)?;
    let mut values = Vec::with_capacity(b * c * oh * ow);
    let mut argmax = Vec::with_capacity(b * c * oh * ow);
    let mut margin = f64::INFINITY;
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut second = f64::NEG_INFINITY;
                let mut best_i = usize::MAX;
                // Row-major scan; strict `>` keeps the first maximum on ties.
                for ky in 0..window {
                    let iy = (oy * stride + ky) as isize - pt as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for kx in 0..window {
                        let ix = (ox * stride + kx) as isize - pl as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        let i = base + iy as usize * w + ix as usize;
                        let v = x[i];
                        if v > best {
                            second = best;
                            best = v;
                            best_i = i;
                        } else if v > second {
                            second = v;
                        }
                    }
                }
                if best_i == usize::MAX {
                    return Err(too_big());
                }
                if second.is_finite() {
                    margin = margin.min(best - second);
                }
                values.push(best);
                argmax.push(best_i);
            }
        }
    }
    Ok(PoolResult { dims: [b, c, oh, ow], values, argmax, margin })
}

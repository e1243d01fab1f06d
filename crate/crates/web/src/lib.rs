//! Browser bindings for three small views of the attention model: the
//! intensity pyramid with its centre-surround contrast, the centre-bias
//! prior, and scoring the prior against fixations clicked by the user.
//!
//! The functions in [`ops`] are plain Rust so they can be tested natively;
//! the exported wrappers only convert errors for JavaScript.

use wasm_bindgen::prelude::*;

pub mod ops {
    use bvap::contrast::{gaussian_pyramid, intensity_map, ContrastConfig};
    use bvap::metrics::{auc_borji, auc_judd, cc, density_from_fixations, nss, FixationSet};
    use bvap::{Error, Graph, Result, Tensor};

    pub const LEVELS: usize = 5;

    /// Splits interleaved `x, y` pairs into fixation points.
    pub fn points(xy: &[u32], size: usize) -> Result<FixationSet> {
        if !xy.len().is_multiple_of(2) {
            return Err(Error::Invalid("fixations come as x,y pairs".into()));
        }
        let pts = xy.chunks(2).map(|p| (p[0] as usize, p[1] as usize)).collect();
        let set = FixationSet::new("clicks", pts);
        set.check_bounds(size, size)?;
        Ok(set)
    }

    fn rgba_tensor(rgba: &[u8], size: usize) -> Result<Tensor> {
        if rgba.len() != 4 * size * size {
            return Err(Error::Invalid(format!(
                "expected {} RGBA bytes for {size}x{size}, got {}",
                4 * size * size,
                rgba.len()
            )));
        }
        Ok(Tensor::from_fn([1, 3, size, size], |_, c, y, x| f64::from(rgba[4 * (y * size + x) + c]) / 255.0))
    }

    /// `2·LEVELS` planes of `size²`: the pyramid levels in `[0, 1]`, then
    /// `|I − P_l|` per level scaled so the largest is 1.
    pub fn contrast_planes(rgba: &[u8], size: usize) -> Result<Vec<f64>> {
        let image = rgba_tensor(rgba, size)?;
        let g = Graph::new();
        let intensity = intensity_map(&g, g.constant(image));
        let pyramid = gaussian_pyramid(&g, intensity, &ContrastConfig::for_base(size, 1))?;
        let (i, p) = (g.value(intensity), g.value(pyramid));
        let mut out = p.data().to_vec();
        let contrast: Vec<f64> =
            (0..LEVELS).flat_map(|l| i.plane(0, 0).iter().zip(p.plane(0, l)).map(|(a, b)| (a - b).abs())).collect();
        let max = contrast.iter().copied().fold(0.0, f64::max);
        out.extend(contrast.iter().map(|v| if max > 0.0 { v / max } else { 0.0 }));
        Ok(out)
    }

    /// The centre-bias density for the given log-variances.
    pub fn centre_bias(size: usize, log_var_x: f64, log_var_y: f64) -> Result<Tensor> {
        let g = Graph::new();
        let m = g.centre_bias(g.constant(Tensor::scalar(log_var_x)), g.constant(Tensor::scalar(log_var_y)), 1, size)?;
        let out = g.value(m).clone();
        Ok(out)
    }

    /// Groundtruth-style density of the clicked points.
    pub fn fixation_density(xy: &[u32], size: usize, sigma: f64) -> Result<Tensor> {
        density_from_fixations(&points(xy, size)?, size, size, sigma)
    }

    /// CC (against the click density), NSS, AUC-Judd and AUC-Borji of the
    /// prior; undefined metrics are NaN.
    pub fn score_prior(xy: &[u32], size: usize, log_var_x: f64, log_var_y: f64, sigma: f64) -> Result<[f64; 4]> {
        let fix = points(xy, size)?;
        if fix.is_empty() {
            return Err(Error::Invalid("click at least one fixation".into()));
        }
        let prior = centre_bias(size, log_var_x, log_var_y)?;
        let density = density_from_fixations(&fix, size, size, sigma)?;
        let nan = |r: Result<f64>| r.unwrap_or(f64::NAN);
        Ok([
            nan(cc(&prior, &density)),
            nan(nss(&prior, &fix)),
            nan(auc_judd(&prior, &fix)),
            nan(auc_borji(&prior, &fix, 100, 0)),
        ])
    }

    /// Scales a map so its maximum is 1.
    pub fn to_unit(t: &Tensor) -> Vec<f64> {
        let max = t.data().iter().copied().fold(0.0, f64::max);
        t.data().iter().map(|v| if max > 0.0 { v / max } else { 0.0 }).collect()
    }
}

fn js(e: bvap::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Pyramid levels then contrast maps, each `size * size`, all in `[0, 1]`.
#[wasm_bindgen]
pub fn contrast_planes(rgba: &[u8], size: usize) -> Result<Vec<f64>, JsError> {
    ops::contrast_planes(rgba, size).map_err(js)
}

/// Centre-bias prior scaled to a maximum of 1.
#[wasm_bindgen]
pub fn centre_bias(size: usize, log_var_x: f64, log_var_y: f64) -> Result<Vec<f64>, JsError> {
    ops::centre_bias(size, log_var_x, log_var_y).map(|t| ops::to_unit(&t)).map_err(js)
}

/// Density of clicked fixations (`x, y` pairs) scaled to a maximum of 1.
#[wasm_bindgen]
pub fn fixation_density(xy: &[u32], size: usize, sigma: f64) -> Result<Vec<f64>, JsError> {
    ops::fixation_density(xy, size, sigma).map(|t| ops::to_unit(&t)).map_err(js)
}

/// `[cc, nss, auc_judd, auc_borji]` of the prior against the clicks.
#[wasm_bindgen]
pub fn score_prior(xy: &[u32], size: usize, log_var_x: f64, log_var_y: f64, sigma: f64) -> Result<Vec<f64>, JsError> {
    ops::score_prior(xy, size, log_var_x, log_var_y, sigma).map(|s| s.to_vec()).map_err(js)
}

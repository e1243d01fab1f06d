//! Gaussian kernels and separable Gaussian filtering of (height × width) planes.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Truncation radius `round(3σ)`, at least 1.
pub fn kernel_radius(sigma: f64) -> usize {
    ((3.0 * sigma).round() as usize).max(1)
}

/// Normalized 1-D Gaussian taps of length `2·radius + 1`.
pub fn kernel1d(sigma: f64, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let mut k: Vec<f64> = (-r..=r).map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// 2-D Gaussian kernel of side `2·round(3σ)+1`, entries summing to 1.
pub fn gaussian_kernel2d(sigma: f64) -> Result<Tensor> {
    gaussian_kernel2d_sized(sigma, 2 * kernel_radius(sigma) + 1)
}

/// 2-D Gaussian kernel with an explicit odd side length.
pub fn gaussian_kernel2d_sized(sigma: f64, size: usize) -> Result<Tensor> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Invalid(format!("gaussian sigma must be positive, got {sigma}")));
    }
    if size.is_multiple_of(2) {
        return Err(Error::Invalid(format!("gaussian kernel side must be odd, got {size}")));
    }
    let r = (size / 2) as f64;
    let mut t = Tensor::from_fn([1, 1, size, size], |_, _, y, x| {
        let dy = y as f64 - r;
        let dx = x as f64 - r;
        (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
    });
    let s = t.sum();
    t.data_mut().iter_mut().for_each(|v| *v /= s);
    Ok(t)
}

/// How the filter treats pixels beyond the border.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BorderMode {
    /// Zero padding: mass near the border leaks out.
    Zero,
    /// Taps falling outside are dropped and the rest renormalized, so a
    /// constant plane maps to exactly the same constant.
    Renormalized,
}

/// Separable Gaussian filter over (height × width) planes.
#[derive(Clone, Debug)]
pub struct GaussianBlur {
    taps: Vec<f64>,
    mode: BorderMode,
}

impl GaussianBlur {
    /// Filter truncated at `round(3σ)`.
    pub fn new(sigma: f64, mode: BorderMode) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::Invalid(format!("gaussian sigma must be positive, got {sigma}")));
        }
        Ok(GaussianBlur { taps: kernel1d(sigma, kernel_radius(sigma)), mode })
    }

    /// Filter with an explicit odd side length.
    pub fn sized(sigma: f64, size: usize, mode: BorderMode) -> Result<Self> {
        if !(sigma > 0.0) || size.is_multiple_of(2) {
            return Err(Error::Invalid(format!("bad gaussian filter sigma={sigma} size={size}")));
        }
        Ok(GaussianBlur { taps: kernel1d(sigma, size / 2), mode })
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn mode(&self) -> BorderMode {
        self.mode
    }

    fn radius(&self) -> usize {
        self.taps.len() / 2
    }

    /// Per-position (first valid source index, weights) for a line of `n`.
    fn line_weights(&self, n: usize) -> Vec<(usize, Vec<f64>)> {
        let r = self.radius() as isize;
        (0..n as isize)
            .map(|i| {
                let lo = (i - r).max(0);
                let hi = (i + r).min(n as isize - 1);
                let mut w: Vec<f64> = (lo..=hi).map(|j| self.taps[(j - i + r) as usize]).collect();
                if self.mode == BorderMode::Renormalized {
                    let s: f64 = w.iter().sum();
                    w.iter_mut().for_each(|v| *v /= s);
                }
                (lo as usize, w)
            })
            .collect()
    }

    fn line_forward(&self, table: &[(usize, Vec<f64>)], src: &[f64], dst: &mut [f64]) {
        for (i, (lo, w)) in table.iter().enumerate() {
            dst[i] = match self.mode {
                BorderMode::Zero => w.iter().zip(&src[*lo..]).map(|(a, b)| a * b).sum(),
                BorderMode::Renormalized => {
                    // x_i + Σ w_ij (x_j − x_i): exact on constant lines.
                    let xi = src[i];
                    xi + w.iter().zip(&src[*lo..]).map(|(a, b)| a * (b - xi)).sum::<f64>()
                }
            };
        }
    }

    fn line_adjoint(&self, table: &[(usize, Vec<f64>)], g: &[f64], dst: &mut [f64]) {
        dst.fill(0.0);
        for (i, (lo, w)) in table.iter().enumerate() {
            let gi = g[i];
            for (k, wk) in w.iter().enumerate() {
                dst[lo + k] += wk * gi;
            }
            if self.mode == BorderMode::Renormalized {
                dst[i] -= gi * w.iter().sum::<f64>();
                dst[i] += gi;
            }
        }
    }

    fn apply(&self, h: usize, w: usize, src: &[f64], adjoint: bool) -> Vec<f64> {
        let rows = self.line_weights(w);
        let cols = self.line_weights(h);
        let run = |table: &[(usize, Vec<f64>)], s: &[f64], d: &mut [f64]| {
            if adjoint {
                self.line_adjoint(table, s, d)
            } else {
                self.line_forward(table, s, d)
            }
        };
        let horizontal = |input: &[f64]| {
            let mut out = vec![0.0; h * w];
            for y in 0..h {
                run(&rows, &input[y * w..(y + 1) * w], &mut out[y * w..(y + 1) * w]);
            }
            out
        };
        let vertical = |input: &[f64]| {
            let mut out = vec![0.0; h * w];
            let mut col = vec![0.0; h];
            let mut res = vec![0.0; h];
            for x in 0..w {
                for y in 0..h {
                    col[y] = input[y * w + x];
                }
                run(&cols, &col, &mut res);
                for y in 0..h {
                    out[y * w + x] = res[y];
                }
            }
            out
        };
        if adjoint {
            horizontal(&vertical(src))
        } else {
            vertical(&horizontal(src))
        }
    }

    /// Filters one plane.
    pub fn forward_plane(&self, h: usize, w: usize, src: &[f64]) -> Vec<f64> {
        self.apply(h, w, src, false)
    }

    /// Transpose of [`forward_plane`](Self::forward_plane) applied to `g`.
    pub fn adjoint_plane(&self, h: usize, w: usize, g: &[f64]) -> Vec<f64> {
        self.apply(h, w, g, true)
    }

    /// Filters every plane of `t`.
    pub fn forward(&self, t: &Tensor) -> Tensor {
        let [b, c, h, w] = t.dims();
        let mut data = Vec::with_capacity(t.len());
        for p in 0..b * c {
            data.extend(self.forward_plane(h, w, &t.data()[p * h * w..(p + 1) * h * w]));
        }
        Tensor::new(t.dims(), data).expect("same dims")
    }
}

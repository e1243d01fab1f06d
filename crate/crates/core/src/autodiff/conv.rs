//! Direct 2-D convolution kernels (cross-correlation, NCHW / OIHW).
//!
//! The inner loops run over contiguous output rows so they vectorize; the
//! stride-1 path covers every convolution in the network.

use crate::error::{Error, Result};
use crate::tensor::Dims;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero border sized so that `out = ceil(in / stride)`.
    Same,
    /// No border.
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
    pub padding: Padding,
}

impl ConvSpec {
    pub const SAME: ConvSpec = ConvSpec { stride: 1, dilation: 1, padding: Padding::Same };

    pub fn dilated(dilation: usize) -> Self {
        ConvSpec { dilation, ..Self::SAME }
    }
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self::SAME
    }
}

/// Resolved geometry of one convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_t: usize,
    pub pad_l: usize,
    pub stride: usize,
    pub dilation: usize,
}

fn out_extent(len: usize, k: usize, spec: &ConvSpec) -> Option<(usize, usize)> {
    let eff = (k - 1) * spec.dilation + 1;
    match spec.padding {
        Padding::Valid => {
            if eff > len {
                None
            } else {
                Some(((len - eff) / spec.stride + 1, 0))
            }
        }
        Padding::Same => {
            let out = len.div_ceil(spec.stride);
            let total = ((out - 1) * spec.stride + eff).saturating_sub(len);
            Some((out, total / 2))
        }
    }
}

impl ConvGeom {
    pub fn new(input: Dims, kernel: Dims, spec: &ConvSpec) -> Result<Self> {
        let [batch, cin, in_h, in_w] = input;
        let [cout, kcin, kh, kw] = kernel;
        if spec.stride == 0 || spec.dilation == 0 {
            return Err(Error::Invalid("conv2d stride and dilation must be positive".into()));
        }
        if kcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input {input:?} has {cin} channels but kernel {kernel:?} expects {kcin}"),
            ));
        }
        if spec.padding == Padding::Same && (kh % 2 == 0 || kw % 2 == 0) {
            return Err(Error::shape("conv2d", format!("\"same\" padding needs odd kernel sides, kernel {kernel:?}")));
        }
        let (out_h, pad_t) = out_extent(in_h, kh, spec)
            .ok_or_else(|| Error::shape("conv2d", format!("kernel {kernel:?} larger than input {input:?}")))?;
        let (out_w, pad_l) = out_extent(in_w, kw, spec)
            .ok_or_else(|| Error::shape("conv2d", format!("kernel {kernel:?} larger than input {input:?}")))?;
        Ok(ConvGeom {
            batch,
            cin,
            cout,
            in_h,
            in_w,
            kh,
            kw,
            out_h,
            out_w,
            pad_t,
            pad_l,
            stride: spec.stride,
            dilation: spec.dilation,
        })
    }

    pub fn out_dims(&self) -> Dims {
        [self.batch, self.cout, self.out_h, self.out_w]
    }

    /// Input row for output row `oy` at kernel row `ky`, if inside the input.
    #[inline]
    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky * self.dilation) as isize - self.pad_t as isize;
        (iy >= 0 && (iy as usize) < self.in_h).then_some(iy as usize)
    }

    /// For stride 1: output column range `[lo, hi)` whose input column
    /// `ox + shift` stays inside the input, and the (signed) shift.
    #[inline]
    fn col_span(&self, kx: usize) -> (usize, usize, isize) {
        let shift = (kx * self.dilation) as isize - self.pad_l as isize;
        let lo = (-shift).max(0) as usize;
        let hi = (self.in_w as isize - shift).clamp(0, self.out_w as isize) as usize;
        (lo.min(hi), hi, shift)
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_t == 0 && self.pad_l == 0
    }
}

/// Upper bound on the im2col buffer, in elements.
const COL_BUDGET: usize = 1 << 21;

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    /// Output rows per im2col chunk.
    fn chunk_rows(&self) -> usize {
        (COL_BUDGET / (self.patch_len() * self.out_w).max(1)).clamp(1, self.out_h)
    }

    /// Input column for output column `ox` at kernel column `kx`.
    #[inline]
    fn in_col(&self, ox: usize, kx: usize) -> Option<usize> {
        let ix = (ox * self.stride + kx * self.dilation) as isize - self.pad_l as isize;
        (ix >= 0 && (ix as usize) < self.in_w).then_some(ix as usize)
    }

    /// Fills `cols` (`patch_len x rows*out_w`, row-major) with the patches
    /// of output rows `oy0..oy0+rows` of one image.
    fn im2col(&self, xp: &[f64], oy0: usize, rows: usize, cols: &mut [f64]) {
        let n = rows * self.out_w;
        let in_hw = self.in_h * self.in_w;
        for ci in 0..self.cin {
            let plane = &xp[ci * in_hw..][..in_hw];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let r = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[r * n..][..n];
                    for (k, oy) in (oy0..oy0 + rows).enumerate() {
                        let drow = &mut dst[k * self.out_w..][..self.out_w];
                        let Some(iy) = self.in_row(oy, ky) else {
                            drow.fill(0.0);
                            continue;
                        };
                        let src = &plane[iy * self.in_w..][..self.in_w];
                        if self.stride == 1 {
                            let (lo, hi, shift) = self.col_span(kx);
                            drow[..lo].fill(0.0);
                            drow[hi..].fill(0.0);
                            let s = (lo as isize + shift) as usize;
                            drow[lo..hi].copy_from_slice(&src[s..s + hi - lo]);
                        } else {
                            for (ox, d) in drow.iter_mut().enumerate() {
                                *d = self.in_col(ox, kx).map_or(0.0, |ix| src[ix]);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters `cols` back into `dxp`.
    fn col2im(&self, cols: &[f64], oy0: usize, rows: usize, dxp: &mut [f64]) {
        let n = rows * self.out_w;
        let in_hw = self.in_h * self.in_w;
        for ci in 0..self.cin {
            let plane = &mut dxp[ci * in_hw..][..in_hw];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let r = (ci * self.kh + ky) * self.kw + kx;
                    let src = &cols[r * n..][..n];
                    for (k, oy) in (oy0..oy0 + rows).enumerate() {
                        let Some(iy) = self.in_row(oy, ky) else { continue };
                        let srow = &src[k * self.out_w..][..self.out_w];
                        let drow = &mut plane[iy * self.in_w..][..self.in_w];
                        if self.stride == 1 {
                            let (lo, hi, shift) = self.col_span(kx);
                            let s = (lo as isize + shift) as usize;
                            for (d, v) in drow[s..s + hi - lo].iter_mut().zip(&srow[lo..hi]) {
                                *d += v;
                            }
                        } else {
                            for (ox, v) in srow.iter().enumerate() {
                                if let Some(ix) = self.in_col(ox, kx) {
                                    drow[ix] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `C[m x n] = beta*C + A[m x k] * B[k x n]` with explicit row strides
/// (all column strides 1, except where transposes are expressed by strides).
#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
    rsc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices covering every element addressed by the
    // given shapes and strides; `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), rsc, 1);
    }
}

pub(crate) fn forward(g: &ConvGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let in_hw = g.in_h * g.in_w;
    let out_hw = g.out_h * g.out_w;
    let kk = g.patch_len();
    let mut out = vec![0.0; g.batch * g.cout * out_hw];
    let rows = g.chunk_rows();
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; kk * rows * g.out_w] };
    for b in 0..g.batch {
        let xp = &x[b * g.cin * in_hw..][..g.cin * in_hw];
        let ob = &mut out[b * g.cout * out_hw..][..g.cout * out_hw];
        if let Some(bias) = bias {
            for (co, plane) in ob.chunks_exact_mut(out_hw).enumerate() {
                plane.fill(bias[co]);
            }
        }
        if g.is_pointwise() {
            gemm(g.cout, kk, out_hw, w, (kk as isize, 1), xp, (in_hw as isize, 1), 1.0, ob, out_hw as isize);
            continue;
        }
        let mut oy0 = 0;
        while oy0 < g.out_h {
            let r = rows.min(g.out_h - oy0);
            let n = r * g.out_w;
            g.im2col(xp, oy0, r, &mut cols[..kk * n]);
            let c = &mut ob[oy0 * g.out_w..];
            gemm(g.cout, kk, n, w, (kk as isize, 1), &cols, (n as isize, 1), 1.0, c, out_hw as isize);
            oy0 += r;
        }
    }
    out
}

/// Gradient w.r.t. the input.
pub(crate) fn backward_input(g: &ConvGeom, dy: &[f64], w: &[f64]) -> Vec<f64> {
    let in_hw = g.in_h * g.in_w;
    let out_hw = g.out_h * g.out_w;
    let kk = g.patch_len();
    let mut dx = vec![0.0; g.batch * g.cin * in_hw];
    let rows = g.chunk_rows();
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; kk * rows * g.out_w] };
    for b in 0..g.batch {
        let dyb = &dy[b * g.cout * out_hw..][..g.cout * out_hw];
        let dxb = &mut dx[b * g.cin * in_hw..][..g.cin * in_hw];
        // W^T is read through swapped strides.
        if g.is_pointwise() {
            gemm(kk, g.cout, out_hw, w, (1, kk as isize), dyb, (out_hw as isize, 1), 0.0, dxb, in_hw as isize);
            continue;
        }
        let mut oy0 = 0;
        while oy0 < g.out_h {
            let r = rows.min(g.out_h - oy0);
            let n = r * g.out_w;
            let dyc = &dyb[oy0 * g.out_w..];
            gemm(kk, g.cout, n, w, (1, kk as isize), dyc, (out_hw as isize, 1), 0.0, &mut cols[..kk * n], n as isize);
            g.col2im(&cols[..kk * n], oy0, r, dxb);
            oy0 += r;
        }
    }
    dx
}

/// Gradients w.r.t. kernel and bias.
pub(crate) fn backward_params(g: &ConvGeom, dy: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let in_hw = g.in_h * g.in_w;
    let out_hw = g.out_h * g.out_w;
    let kk = g.patch_len();
    let mut dw = vec![0.0; g.cout * kk];
    let mut db = vec![0.0; g.cout];
    let rows = g.chunk_rows();
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; kk * rows * g.out_w] };
    for b in 0..g.batch {
        let dyb = &dy[b * g.cout * out_hw..][..g.cout * out_hw];
        let xp = &x[b * g.cin * in_hw..][..g.cin * in_hw];
        for (co, plane) in dyb.chunks_exact(out_hw).enumerate() {
            db[co] += plane.iter().sum::<f64>();
        }
        // dW += dY * cols^T, with cols^T read through swapped strides.
        if g.is_pointwise() {
            gemm(g.cout, out_hw, kk, dyb, (out_hw as isize, 1), xp, (1, in_hw as isize), 1.0, &mut dw, kk as isize);
            continue;
        }
        let mut oy0 = 0;
        while oy0 < g.out_h {
            let r = rows.min(g.out_h - oy0);
            let n = r * g.out_w;
            g.im2col(xp, oy0, r, &mut cols[..kk * n]);
            let dyc = &dyb[oy0 * g.out_w..];
            gemm(g.cout, n, kk, dyc, (out_hw as isize, 1), &cols, (1, n as isize), 1.0, &mut dw, kk as isize);
            oy0 += r;
        }
    }
    (dw, db)
}

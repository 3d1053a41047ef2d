//! Low-level numeric kernels shared by the dense and sparse operators.

use crate::error::{shape_err, Result};

/// `C = op(A) * op(B)` (or `C += ...` when `accumulate`), all row-major.
///
/// `A` is logically `m x k`; when `a_t` it is stored as `k x m`. Same for
/// `B` (`k x n`, stored `n x k` when `b_t`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are checked above against the logical dims and
    // the strides address exactly those elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a single-image 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(c_in: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 {
            return Err(shape_err("conv2d", "stride must be positive"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(shape_err(
                "conv2d",
                format!("kernel {}x{} larger than padded input {}x{} (pad {})", kh, kw, h, w, pad),
            ));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Ok(Self { c_in, h, w, kh, kw, stride, pad, ho, wo })
    }

    /// Rows of the column matrix: `c_in * kh * kw`.
    pub fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    /// Input coordinate for output `(oy, ox)` and kernel tap `(ky, kx)`.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
        if iy < 0 || ix < 0 || iy >= self.h as isize || ix >= self.w as isize {
            None
        } else {
            Some((iy as usize, ix as usize))
        }
    }
}

/// Gather input patches for the listed output positions into a
/// `k x positions.len()` column matrix. Inputs flagged invisible read as 0.
pub fn im2col(g: &ConvGeom, input: &[f64], positions: &[usize], visible: Option<&[bool]>, cols: &mut [f64]) {
    let p = positions.len();
    debug_assert_eq!(cols.len(), g.k() * p);
    let plane = g.h * g.w;
    for c in 0..g.c_in {
        let chan = &input[c * plane..(c + 1) * plane];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for (j, &pos) in positions.iter().enumerate() {
                    let (oy, ox) = (pos / g.wo, pos % g.wo);
                    dst[j] = match g.source(oy, ox, ky, kx) {
                        Some((iy, ix)) => {
                            let idx = iy * g.w + ix;
                            match visible {
                                Some(v) if !v[idx] => 0.0,
                                _ => chan[idx],
                            }
                        }
                        None => 0.0,
                    };
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add a column matrix back onto the input
/// grid. Invisible inputs receive nothing.
pub fn col2im(g: &ConvGeom, cols: &[f64], positions: &[usize], visible: Option<&[bool]>, out: &mut [f64]) {
    let p = positions.len();
    let plane = g.h * g.w;
    for c in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for (j, &pos) in positions.iter().enumerate() {
                    let (oy, ox) = (pos / g.wo, pos % g.wo);
                    if let Some((iy, ix)) = g.source(oy, ox, ky, kx) {
                        let idx = iy * g.w + ix;
                        if visible.map_or(true, |v| v[idx]) {
                            out[c * plane + idx] += src[j];
                        }
                    }
                }
            }
        }
    }
}

//! Raw dense kernels shared by forward and backward passes.

/// `c (m x n) += a (m x k) * b (k x n)` with explicit row/column strides,
/// so transposed operands need no copies.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    unsafe {
        // SAFETY: callers pass slices whose extents cover every strided
        // access implied by (m, k, n) and the strides.
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
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a channels-last 2-D convolution or its transpose.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    /// Convolution output size (or transposed-convolution input size).
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Index into the (h, w) plane for output `(o_h, o_w)` and tap `(k_h, k_w)`.
    #[inline]
    pub fn source(&self, o_h: usize, o_w: usize, k_h: usize, k_w: usize) -> Option<usize> {
        let y = (o_h * self.sh + k_h) as isize - self.ph as isize;
        let x = (o_w * self.sw + k_w) as isize - self.pw as isize;
        if y < 0 || x < 0 || y as usize >= self.h || x as usize >= self.w {
            None
        } else {
            Some(y as usize * self.w + x as usize)
        }
    }
}

/// Patch matrix `(oh*ow, kh*kw*c)` of a channels-last `(h, w, c)` input.
pub fn im2col(x: &[f64], c: usize, g: &ConvGeom) -> Vec<f64> {
    let cols = g.kh * g.kw * c;
    let mut out = vec![0.0; g.oh * g.ow * cols];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = (oy * g.ow + ox) * cols;
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    if let Some(src) = g.source(oy, ox, ky, kx) {
                        let dst = row + (ky * g.kw + kx) * c;
                        out[dst..dst + c].copy_from_slice(&x[src * c..(src + 1) * c]);
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatter-adds patch rows back into `(h, w, c)`.
pub fn col2im_add(cols: &[f64], c: usize, g: &ConvGeom, x: &mut [f64]) {
    let width = g.kh * g.kw * c;
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = (oy * g.ow + ox) * width;
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    if let Some(dst) = g.source(oy, ox, ky, kx) {
                        let src = row + (ky * g.kw + kx) * c;
                        for (d, s) in x[dst * c..(dst + 1) * c].iter_mut().zip(&cols[src..src + c]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

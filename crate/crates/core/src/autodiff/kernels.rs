//! Convolution, resize and matrix kernels shared by forward and backward passes.

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands.
///
/// `op(a)` is `m x k`, `op(b)` is `k x n`, `c` is `m x n`. When `a_t` is set, `a`
/// is stored as `k x m`; likewise for `b_t`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above describe exactly the row-major buffers whose
    // lengths are checked against m, k, n.
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

/// Geometry of a 2-D convolution mapping `[in_c, in_h, in_w]` to `[out_c, out_h, out_w]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeom {
    pub fn valid(in_c: usize, in_h: usize, in_w: usize, out_c: usize, kernel: usize, stride: usize) -> Option<Self> {
        if in_h < kernel || in_w < kernel {
            return None;
        }
        Some(ConvGeom {
            in_c,
            in_h,
            in_w,
            out_c,
            out_h: (in_h - kernel) / stride + 1,
            out_w: (in_w - kernel) / stride + 1,
            kernel,
            stride,
            pad_top: 0,
            pad_left: 0,
        })
    }

    pub fn same(in_c: usize, in_h: usize, in_w: usize, out_c: usize, kernel: usize, stride: usize) -> Self {
        let out_h = in_h.div_ceil(stride);
        let out_w = in_w.div_ceil(stride);
        let pad_h = ((out_h - 1) * stride + kernel).saturating_sub(in_h);
        let pad_w = ((out_w - 1) * stride + kernel).saturating_sub(in_w);
        ConvGeom {
            in_c,
            in_h,
            in_w,
            out_c,
            out_h,
            out_w,
            kernel,
            stride,
            pad_top: pad_h / 2,
            pad_left: pad_w / 2,
        }
    }

    pub fn col_rows(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// A 1x1, stride-1 convolution reads its input directly as the column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad_top == 0 && self.pad_left == 0
    }
}

/// Unfold one `[in_c, in_h, in_w]` sample into `[in_c * k * k, out_h * out_w]`.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let k = g.kernel;
    let p = g.col_cols();
    for c in 0..g.in_c {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad_top as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad_left as isize;
                        *v = if ix < 0 || ix >= g.in_w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into `[in_c, in_h, in_w]`.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let k = g.kernel;
    let p = g.col_cols();
    for c in 0..g.in_c {
        let plane = &mut x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad_left as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Linear interpolation taps along one axis, half-pixel centers.
#[derive(Clone, Debug, PartialEq)]
pub struct AxisTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl AxisTaps {
    pub fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let mut lo = Vec::with_capacity(output);
        let mut hi = Vec::with_capacity(output);
        let mut frac = Vec::with_capacity(output);
        for o in 0..output {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            lo.push(i0);
            hi.push(i1);
            frac.push(if i1 == i0 { 0.0 } else { src - i0 as f64 });
        }
        AxisTaps { lo, hi, frac }
    }
}

pub(crate) fn resize_plane(src: &[f64], in_w: usize, ty: &AxisTaps, tx: &AxisTaps, dst: &mut [f64]) {
    let out_w = tx.lo.len();
    for (oy, row) in dst.chunks_mut(out_w).enumerate() {
        let fy = ty.frac[oy];
        let r0 = &src[ty.lo[oy] * in_w..(ty.lo[oy] + 1) * in_w];
        let r1 = &src[ty.hi[oy] * in_w..(ty.hi[oy] + 1) * in_w];
        for (ox, v) in row.iter_mut().enumerate() {
            let fx = tx.frac[ox];
            let (a, b) = (tx.lo[ox], tx.hi[ox]);
            let top = r0[a] * (1.0 - fx) + r0[b] * fx;
            let bot = r1[a] * (1.0 - fx) + r1[b] * fx;
            *v = top * (1.0 - fy) + bot * fy;
        }
    }
}

pub(crate) fn resize_plane_adjoint(grad: &[f64], in_w: usize, ty: &AxisTaps, tx: &AxisTaps, dst: &mut [f64]) {
    let out_w = tx.lo.len();
    for (oy, row) in grad.chunks(out_w).enumerate() {
        let fy = ty.frac[oy];
        for (ox, &g) in row.iter().enumerate() {
            let fx = tx.frac[ox];
            let (a, b) = (tx.lo[ox], tx.hi[ox]);
            let top = g * (1.0 - fy);
            let bot = g * fy;
            dst[ty.lo[oy] * in_w + a] += top * (1.0 - fx);
            dst[ty.lo[oy] * in_w + b] += top * fx;
            dst[ty.hi[oy] * in_w + a] += bot * (1.0 - fx);
            dst[ty.hi[oy] * in_w + b] += bot * fx;
        }
    }
}

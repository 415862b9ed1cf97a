//! Low-level dense kernels shared by the graph ops.

/// Row-major `C = alpha * op(A) * op(B) + beta * C` with `op(A)` of shape
/// `m x k` and `op(B)` of shape `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    beta: f32,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_trans {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: slice lengths checked above; strides describe the row-major
    // (or transposed) layout of each operand within its slice.
    unsafe {
        matrixmultiply::sgemm(
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

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfold one `C x H x W` sample into a `(C*k*k) x (oh*ow)` column matrix.
pub fn im2col(x: &[f32], g: &ConvGeometry, col: &mut [f32]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    let plane = g.in_h * g.in_w;
    let mut row = 0;
    for c in 0..g.in_channels {
        let src = &x[c * plane..(c + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.in_h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src_row = &src[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    if g.stride == 1 {
                        // contiguous run with zero borders
                        let shift = kx as isize - g.pad as isize;
                        let lo = (-shift).max(0) as usize;
                        let hi =
                            ((g.in_w as isize - shift).min(ow as isize)).max(lo as isize) as usize;
                        out_row[..lo].fill(0.0);
                        let s0 = (lo as isize + shift) as usize;
                        out_row[lo..hi].copy_from_slice(&src_row[s0..s0 + (hi - lo)]);
                        out_row[hi..].fill(0.0);
                    } else {
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            *v = if ix < 0 || ix >= g.in_w as isize {
                                0.0
                            } else {
                                src_row[ix as usize]
                            };
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Fold a column matrix back onto a `C x H x W` sample, accumulating overlaps.
pub fn col2im(col: &[f32], g: &ConvGeometry, x: &mut [f32]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    let plane = g.in_h * g.in_w;
    let mut row = 0;
    for c in 0..g.in_channels {
        let dst = &mut x[c * plane..(c + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                let shift = kx as isize - g.pad as isize;
                let (lo, hi) = valid_cols(ow, g.in_w, shift);
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let src_row = &src[oy * ow..(oy + 1) * ow];
                    if g.stride == 1 {
                        if hi > lo {
                            let d0 = (lo as isize + shift) as usize;
                            axpy(1.0, &src_row[lo..hi], &mut dst_row[d0..d0 + (hi - lo)]);
                        }
                        continue;
                    }
                    for (ox, &v) in src_row.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Output columns `[lo, hi)` of a stride-1 row whose input column
/// `ox + shift` lies inside `0..in_w`.
fn valid_cols(ow: usize, in_w: usize, shift: isize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (in_w as isize - shift).min(ow as isize).max(lo as isize) as usize;
    (lo, hi)
}

fn axpy(a: f32, x: &[f32], y: &mut [f32]) {
    for (d, &s) in y.iter_mut().zip(x) {
        *d += a * s;
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes.
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().sum::<f32>() + tail
}

/// Visits every (output channel, weight index, input row segment, output row
/// segment) pairing of a stride-1 convolution of one sample.
fn for_each_tap(
    g: &ConvGeometry,
    cout: usize,
    mut f: impl FnMut(usize, usize, std::ops::Range<usize>, std::ops::Range<usize>),
) {
    debug_assert_eq!(g.stride, 1);
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    let plane = g.in_h * g.in_w;
    for co in 0..cout {
        for c in 0..g.in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    let wi = (c * k + ky) * k + kx;
                    let shift = kx as isize - g.pad as isize;
                    let (lo, hi) = valid_cols(ow, g.in_w, shift);
                    if hi == lo {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let i0 = c * plane + iy as usize * g.in_w + (lo as isize + shift) as usize;
                        let o0 = co * oh * ow + oy * ow + lo;
                        f(co, wi, i0..i0 + (hi - lo), o0..o0 + (hi - lo));
                    }
                }
            }
        }
    }
}

/// Stride-1 convolution of one sample without unfolding, accumulating into
/// `out` (`cout x oh x ow`). Cheaper than im2col when `cout` is tiny.
pub fn conv_direct(x: &[f32], g: &ConvGeometry, w: &[f32], cout: usize, out: &mut [f32]) {
    let rows = g.col_rows();
    for_each_tap(g, cout, |co, wi, xi, oi| {
        axpy(w[co * rows + wi], &x[xi], &mut out[oi])
    });
}

/// Input gradient of [`conv_direct`], accumulated into `dx`.
pub fn conv_direct_input_grad(
    gy: &[f32],
    g: &ConvGeometry,
    w: &[f32],
    cout: usize,
    dx: &mut [f32],
) {
    let rows = g.col_rows();
    for_each_tap(g, cout, |co, wi, xi, oi| {
        axpy(w[co * rows + wi], &gy[oi], &mut dx[xi])
    });
}

/// Weight gradient of [`conv_direct`], accumulated into `dw`.
pub fn conv_direct_weight_grad(
    gy: &[f32],
    g: &ConvGeometry,
    x: &[f32],
    cout: usize,
    dw: &mut [f32],
) {
    let rows = g.col_rows();
    for_each_tap(g, cout, |co, wi, xi, oi| {
        dw[co * rows + wi] += dot(&gy[oi], &x[xi])
    });
}

/// Whether [`conv_direct`] is the faster route for this shape.
pub fn prefers_direct(g: &ConvGeometry, cout: usize) -> bool {
    g.stride == 1 && cout <= 4
}

/// Interpolation taps for one axis of a bilinear resize (half-pixel centers,
/// no corner alignment).
#[derive(Clone, Debug)]
pub struct AxisTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub w_hi: Vec<f32>,
}

impl AxisTaps {
    pub fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let mut lo = Vec::with_capacity(output);
        let mut hi = Vec::with_capacity(output);
        let mut w_hi = Vec::with_capacity(output);
        for o in 0..output {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = if i0 + 1 < input { i0 + 1 } else { i0 };
            lo.push(i0);
            hi.push(i1);
            w_hi.push((src - i0 as f64) as f32);
        }
        AxisTaps { lo, hi, w_hi }
    }
}

pub fn resize_plane(src: &[f32], in_w: usize, ty: &AxisTaps, tx: &AxisTaps, dst: &mut [f32]) {
    let ow = tx.lo.len();
    for (oy, out_row) in dst.chunks_exact_mut(ow).enumerate() {
        let r0 = &src[ty.lo[oy] * in_w..(ty.lo[oy] + 1) * in_w];
        let r1 = &src[ty.hi[oy] * in_w..(ty.hi[oy] + 1) * in_w];
        let wy1 = ty.w_hi[oy];
        let wy0 = 1.0 - wy1;
        for (ox, v) in out_row.iter_mut().enumerate() {
            let (x0, x1, wx1) = (tx.lo[ox], tx.hi[ox], tx.w_hi[ox]);
            let wx0 = 1.0 - wx1;
            *v = wy0 * (wx0 * r0[x0] + wx1 * r0[x1]) + wy1 * (wx0 * r1[x0] + wx1 * r1[x1]);
        }
    }
}

/// Adjoint of [`resize_plane`]: scatters `grad_out` back onto the input plane.
pub fn resize_plane_backward(
    grad_out: &[f32],
    in_w: usize,
    ty: &AxisTaps,
    tx: &AxisTaps,
    grad_in: &mut [f32],
) {
    let ow = tx.lo.len();
    for (oy, g_row) in grad_out.chunks_exact(ow).enumerate() {
        let wy1 = ty.w_hi[oy];
        let wy0 = 1.0 - wy1;
        let (y0, y1) = (ty.lo[oy], ty.hi[oy]);
        for (ox, &g) in g_row.iter().enumerate() {
            let (x0, x1, wx1) = (tx.lo[ox], tx.hi[ox], tx.w_hi[ox]);
            let wx0 = 1.0 - wx1;
            grad_in[y0 * in_w + x0] += g * wy0 * wx0;
            grad_in[y0 * in_w + x1] += g * wy0 * wx1;
            grad_in[y1 * in_w + x0] += g * wy1 * wx0;
            grad_in[y1 * in_w + x1] += g * wy1 * wx1;
        }
    }
}

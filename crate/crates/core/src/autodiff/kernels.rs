//! Raw numeric kernels shared by the graph ops and the non-differentiable
//! inverse passes.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use crate::tensor::Float;

/// `c = alpha * op(a) * op(b) + beta * c` for row-major slices, where `op`
/// optionally transposes. `a` is `m x k` after `op`, `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[Float],
    trans_a: bool,
    b: &[Float],
    trans_b: bool,
    beta: Float,
    c: &mut [Float],
) {
    let a_store = if trans_a { (k, m) } else { (m, k) };
    let b_store = if trans_b { (n, k) } else { (k, n) };
    let a = ArrayView2::from_shape(a_store, a).expect("gemm lhs");
    let b = ArrayView2::from_shape(b_store, b).expect("gemm rhs");
    let a = if trans_a { a.reversed_axes() } else { a };
    let b = if trans_b { b.reversed_axes() } else { b };
    let mut c = ArrayViewMut2::from_shape((m, n), c).expect("gemm out");
    general_mat_mul(1.0, &a, &b, beta, &mut c);
}

/// Unfold a `[C,H,W]` input into `[C*k*k, H*W]` patch columns with zero
/// padding `k/2`.
pub(crate) fn im2col(x: &[Float], c: usize, h: usize, w: usize, k: usize) -> Vec<Float> {
    let hw = h * w;
    let p = (k / 2) as isize;
    let mut cols = vec![0.0; c * k * k * hw];
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - p;
            for kx in 0..k {
                let dx = kx as isize - p;
                let row = ((ci * k + ky) * k + kx) * hw;
                let dst = &mut cols[row..row + hw];
                let (x0, x1) = valid_range(w, dx);
                let (y0, y1) = valid_range(h, dy);
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let sx0 = (x0 as isize + dx) as usize;
                    dst[y * w + x0..y * w + x1].copy_from_slice(&plane[sy * w + sx0..sy * w + sx0 + (x1 - x0)]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into a `[C,H,W]` buffer.
pub(crate) fn col2im(cols: &[Float], c: usize, h: usize, w: usize, k: usize, out: &mut [Float]) {
    let hw = h * w;
    let p = (k / 2) as isize;
    for ci in 0..c {
        for ky in 0..k {
            let dy = ky as isize - p;
            for kx in 0..k {
                let dx = kx as isize - p;
                let row = ((ci * k + ky) * k + kx) * hw;
                let src = &cols[row..row + hw];
                let (x0, x1) = valid_range(w, dx);
                let (y0, y1) = valid_range(h, dy);
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let sx0 = (x0 as isize + dx) as usize;
                    let dst = &mut out[ci * hw + sy * w + sx0..ci * hw + sy * w + sx0 + (x1 - x0)];
                    for (d, s) in dst.iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Output positions `[lo, hi)` along an axis of length `n` whose source
/// position `i + d` is in bounds.
fn valid_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d.max(0)).max(lo as isize) as usize;
    (lo, hi.min(n))
}

pub(crate) struct ConvDims {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

pub(crate) fn conv2d_forward(x: &[Float], kernel: &[Float], bias: Option<&[Float]>, d: &ConvDims) -> Vec<Float> {
    let hw = d.h * d.w;
    let mut out = vec![0.0; d.c_out * hw];
    if let Some(b) = bias {
        for (co, &bv) in b.iter().enumerate() {
            out[co * hw..(co + 1) * hw].fill(bv);
        }
    }
    let kk = d.c_in * d.k * d.k;
    if d.k == 1 {
        gemm(d.c_out, kk, hw, kernel, false, x, false, 1.0, &mut out);
    } else {
        let cols = im2col(x, d.c_in, d.h, d.w, d.k);
        gemm(d.c_out, kk, hw, kernel, false, &cols, false, 1.0, &mut out);
    }
    out
}

/// Returns `(grad_input, grad_kernel, grad_bias)`.
pub(crate) fn conv2d_backward(
    x: &[Float],
    kernel: &[Float],
    g: &[Float],
    d: &ConvDims,
) -> (Vec<Float>, Vec<Float>, Vec<Float>) {
    let hw = d.h * d.w;
    let kk = d.c_in * d.k * d.k;
    let mut gk = vec![0.0; d.c_out * kk];
    let mut gx = vec![0.0; d.c_in * hw];
    if d.k == 1 {
        gemm(d.c_out, hw, kk, g, false, x, true, 0.0, &mut gk);
        gemm(kk, d.c_out, hw, kernel, true, g, false, 0.0, &mut gx);
    } else {
        let cols = im2col(x, d.c_in, d.h, d.w, d.k);
        gemm(d.c_out, hw, kk, g, false, &cols, true, 0.0, &mut gk);
        let mut gcols = vec![0.0; kk * hw];
        gemm(kk, d.c_out, hw, kernel, true, g, false, 0.0, &mut gcols);
        col2im(&gcols, d.c_in, d.h, d.w, d.k, &mut gx);
    }
    let gb = (0..d.c_out).map(|co| g[co * hw..(co + 1) * hw].iter().sum()).collect();
    (gx, gk, gb)
}

/// Squeeze index map: input `[C,H,W]` element `(c,y,x)` goes to output
/// channel `c*4 + (y%2)*2 + (x%2)` at `(y/2, x/2)`.
pub(crate) fn squeeze(x: &[Float], c: usize, h: usize, w: usize) -> Vec<Float> {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![0.0; x.len()];
    for ci in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let oc = ci * 4 + (y % 2) * 2 + (xx % 2);
                out[(oc * h2 + y / 2) * w2 + xx / 2] = x[(ci * h + y) * w + xx];
            }
        }
    }
    out
}

/// Inverse of [`squeeze`]; `c`, `h`, `w` are the unsqueezed dimensions.
pub(crate) fn unsqueeze(x: &[Float], c: usize, h: usize, w: usize) -> Vec<Float> {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![0.0; x.len()];
    for ci in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let oc = ci * 4 + (y % 2) * 2 + (xx % 2);
                out[(ci * h + y) * w + xx] = x[(oc * h2 + y / 2) * w2 + xx / 2];
            }
        }
    }
    out
}

pub(crate) fn sigmoid(v: Float) -> Float {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sigmoid(v: Float) -> Float {
    // -softplus(-v)
    -((-v).max(0.0) + (-v.abs()).exp().ln_1p())
}

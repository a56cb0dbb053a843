//! Pure computation kernels shared by the graph ops and the frozen
//! (non-differentiated) pipeline stages.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;

/// c[m×p] = a[m×k] · b[k×p]
pub(crate) fn matmul_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, p: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * p];
    for i in 0..m {
        let crow = &mut c[i * p..(i + 1) * p];
        for l in 0..k {
            let av = a[i * k + l];
            if av == T::zero() {
                continue;
            }
            let brow = &b[l * p..(l + 1) * p];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * *bv;
            }
        }
    }
    c
}

/// c[m×p] = a[m×k] · b[p×k]ᵀ
pub(crate) fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, p: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * p];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..p {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (av, bv) in arow.iter().zip(brow) {
                acc = acc + *av * *bv;
            }
            c[i * p + j] = acc;
        }
    }
    c
}

/// c[k×p] = a[m×k]ᵀ · b[m×p]
pub(crate) fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, p: usize) -> Vec<T> {
    let mut c = vec![T::zero(); k * p];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * p..(i + 1) * p];
        for (l, av) in arow.iter().enumerate() {
            if *av == T::zero() {
                continue;
            }
            let crow = &mut c[l * p..(l + 1) * p];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + *av * *bv;
            }
        }
    }
    c
}

/// Row-wise softmax with max-subtraction.
pub(crate) fn softmax_rows_kernel<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut y = vec![T::zero(); rows * cols];
    for r in 0..rows {
        let xin = &x[r * cols..(r + 1) * cols];
        let yout = &mut y[r * cols..(r + 1) * cols];
        let mx = xin.iter().fold(T::neg_infinity(), |m, v| m.max(*v));
        let mut sum = T::zero();
        for (o, v) in yout.iter_mut().zip(xin) {
            let e = (*v - mx).exp();
            *o = e;
            sum = sum + e;
        }
        for o in yout.iter_mut() {
            *o = *o / sum;
        }
    }
    y
}

#[inline]
pub fn sigmoid_kernel<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// u·v / (‖u‖‖v‖). Errors on zero-norm inputs.
pub fn cosine_similarity<T: Scalar>(u: &[T], v: &[T]) -> Result<T> {
    if u.len() != v.len() {
        return Err(Error::Shape {
            op: "cosine_similarity",
            detail: alloc::format!("lengths {} vs {}", u.len(), v.len()),
        });
    }
    let mut uu = T::zero();
    let mut vv = T::zero();
    let mut uv = T::zero();
    for (a, b) in u.iter().zip(v) {
        uu = uu + *a * *a;
        vv = vv + *b * *b;
        uv = uv + *a * *b;
    }
    if uu == T::zero() || vv == T::zero() {
        return Err(Error::DegenerateVector);
    }
    Ok(uv / (uu.sqrt() * vv.sqrt()))
}

/// Align-corners source coordinate and interpolation weights for one output
/// index along an axis of `src` samples resized to `dst`.
#[inline]
pub(crate) fn align_corners_taps<T: Scalar>(i: usize, src: usize, dst: usize) -> (usize, usize, T) {
    if dst == 1 || src == 1 {
        return (0, 0, T::zero());
    }
    // exact when dst == src: pos == i
    let pos = s::<T>(i as f64) * s::<T>((src - 1) as f64) / s::<T>((dst - 1) as f64);
    let lo = pos.floor();
    let mut lo_i = lo.to_usize().unwrap_or(0);
    if lo_i >= src - 1 {
        lo_i = src - 2;
    }
    let frac = pos - s::<T>(lo_i as f64);
    (lo_i, lo_i + 1, frac)
}

/// Bilinear resize of `[t, h, w, d]` to `[t, h2, w2, d]`, align-corners.
/// The identity resize copies values exactly.
pub fn bilinear_resize_kernel<T: Scalar>(
    x: &[T],
    t: usize,
    h: usize,
    w: usize,
    d: usize,
    h2: usize,
    w2: usize,
) -> Vec<T> {
    if h2 == h && w2 == w {
        return x.to_vec();
    }
    let mut out = vec![T::zero(); t * h2 * w2 * d];
    for ti in 0..t {
        let base_in = ti * h * w * d;
        let base_out = ti * h2 * w2 * d;
        for y in 0..h2 {
            let (y0, y1, fy) = align_corners_taps::<T>(y, h, h2);
            let wy0 = T::one() - fy;
            for xo in 0..w2 {
                let (x0, x1, fx) = align_corners_taps::<T>(xo, w, w2);
                let wx0 = T::one() - fx;
                let o = base_out + (y * w2 + xo) * d;
                let p00 = base_in + (y0 * w + x0) * d;
                let p01 = base_in + (y0 * w + x1) * d;
                let p10 = base_in + (y1 * w + x0) * d;
                let p11 = base_in + (y1 * w + x1) * d;
                let w00 = wy0 * wx0;
                let w01 = wy0 * fx;
                let w10 = fy * wx0;
                let w11 = fy * fx;
                for c in 0..d {
                    out[o + c] = w00 * x[p00 + c]
                        + w01 * x[p01 + c]
                        + w10 * x[p10 + c]
                        + w11 * x[p11 + c];
                }
            }
        }
    }
    out
}

/// Transpose of the bilinear interpolation: scatters `grad_out` back onto the
/// source grid with the same taps and weights.
pub(crate) fn bilinear_resize_backward<T: Scalar>(
    grad_out: &[T],
    t: usize,
    h: usize,
    w: usize,
    d: usize,
    h2: usize,
    w2: usize,
    grad_in: &mut [T],
) {
    if h2 == h && w2 == w {
        for (g, go) in grad_in.iter_mut().zip(grad_out) {
            *g = *g + *go;
        }
        return;
    }
    for ti in 0..t {
        let base_in = ti * h * w * d;
        let base_out = ti * h2 * w2 * d;
        for y in 0..h2 {
            let (y0, y1, fy) = align_corners_taps::<T>(y, h, h2);
            let wy0 = T::one() - fy;
            for xo in 0..w2 {
                let (x0, x1, fx) = align_corners_taps::<T>(xo, w, w2);
                let wx0 = T::one() - fx;
                let o = base_out + (y * w2 + xo) * d;
                let p00 = base_in + (y0 * w + x0) * d;
                let p01 = base_in + (y0 * w + x1) * d;
                let p10 = base_in + (y1 * w + x0) * d;
                let p11 = base_in + (y1 * w + x1) * d;
                let w00 = wy0 * wx0;
                let w01 = wy0 * fx;
                let w10 = fy * wx0;
                let w11 = fy * fx;
                for c in 0..d {
                    let g = grad_out[o + c];
                    grad_in[p00 + c] = grad_in[p00 + c] + w00 * g;
                    grad_in[p01 + c] = grad_in[p01 + c] + w01 * g;
                    grad_in[p10 + c] = grad_in[p10 + c] + w10 * g;
                    grad_in[p11 + c] = grad_in[p11 + c] + w11 * g;
                }
            }
        }
    }
}

/// Per-frame cross-correlation of `[t, h, w, cin]` with `[k, k, cin, cout]`,
/// zero padding.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_kernel<T: Scalar>(
    x: &[T],
    t: usize,
    h: usize,
    w: usize,
    cin: usize,
    kernel: &[T],
    k: usize,
    cout: usize,
    stride: usize,
    pad: usize,
) -> (Vec<T>, usize, usize) {
    let h_out = (h + 2 * pad - k) / stride + 1;
    let w_out = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![T::zero(); t * h_out * w_out * cout];
    for ti in 0..t {
        for yo in 0..h_out {
            for xo in 0..w_out {
                let obase = ((ti * h_out + yo) * w_out + xo) * cout;
                for dy in 0..k {
                    let yi = (yo * stride + dy) as isize - pad as isize;
                    if yi < 0 || yi >= h as isize {
                        continue;
                    }
                    for dx in 0..k {
                        let xi = (xo * stride + dx) as isize - pad as isize;
                        if xi < 0 || xi >= w as isize {
                            continue;
                        }
                        let ibase = ((ti * h + yi as usize) * w + xi as usize) * cin;
                        let kbase = (dy * k + dx) * cin * cout;
                        for ci in 0..cin {
                            let xv = x[ibase + ci];
                            if xv == T::zero() {
                                continue;
                            }
                            let krow = &kernel[kbase + ci * cout..kbase + (ci + 1) * cout];
                            let orow = &mut out[obase..obase + cout];
                            for (ov, kv) in orow.iter_mut().zip(krow) {
                                *ov = *ov + xv * *kv;
                            }
                        }
                    }
                }
            }
        }
    }
    (out, h_out, w_out)
}

/// Input and weight gradients for `conv2d_kernel`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Scalar>(
    grad_out: &[T],
    x: &[T],
    t: usize,
    h: usize,
    w: usize,
    cin: usize,
    kernel: &[T],
    k: usize,
    cout: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
    grad_x: Option<&mut [T]>,
    grad_k: Option<&mut [T]>,
) {
    let mut gx = grad_x;
    let mut gk = grad_k;
    for ti in 0..t {
        for yo in 0..h_out {
            for xo in 0..w_out {
                let obase = ((ti * h_out + yo) * w_out + xo) * cout;
                let gout = &grad_out[obase..obase + cout];
                for dy in 0..k {
                    let yi = (yo * stride + dy) as isize - pad as isize;
                    if yi < 0 || yi >= h as isize {
                        continue;
                    }
                    for dx in 0..k {
                        let xi = (xo * stride + dx) as isize - pad as isize;
                        if xi < 0 || xi >= w as isize {
                            continue;
                        }
                        let ibase = ((ti * h + yi as usize) * w + xi as usize) * cin;
                        let kbase = (dy * k + dx) * cin * cout;
                        for ci in 0..cin {
                            let krow = &kernel[kbase + ci * cout..kbase + (ci + 1) * cout];
                            if let Some(gx) = gx.as_deref_mut() {
                                let mut acc = T::zero();
                                for (gv, kv) in gout.iter().zip(krow) {
                                    acc = acc + *gv * *kv;
                                }
                                gx[ibase + ci] = gx[ibase + ci] + acc;
                            }
                            if let Some(gk) = gk.as_deref_mut() {
                                let xv = x[ibase + ci];
                                if xv != T::zero() {
                                    let grow =
                                        &mut gk[kbase + ci * cout..kbase + (ci + 1) * cout];
                                    for (gw, gv) in grow.iter_mut().zip(gout) {
                                        *gw = *gw + xv * *gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Numerically checked constructor helper: verifies finiteness of a result
/// tensor in debug builds.
#[inline]
pub(crate) fn debug_check_finite<T: Scalar>(t: &Tensor<T>, _op: &'static str) {
    debug_assert!(t.all_finite(), "non-finite values out of {_op}");
}

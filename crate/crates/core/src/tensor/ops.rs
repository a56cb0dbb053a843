//! Differentiable operations recorded on a [`Graph`].
//!
//! Each op validates shapes, computes the forward value through a pure
//! kernel, and (when the context is recording and at least one input is
//! tracked) pushes a backward closure that scatters the output gradient to
//! its inputs.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::{s, su, Scalar};
use crate::tensor::graph::{Graph, Var};
use crate::tensor::kernels::*;
use crate::tensor::Tensor;

fn shape_err<T>(op: &'static str, detail: alloc::string::String) -> Result<T> {
    Err(Error::Shape { op, detail })
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (T::one() + (-x.abs()).exp()).ln()
}

impl<T: Scalar> Graph<T> {
    fn binary_elementwise(
        &self,
        op: &'static str,
        a: &Var<T>,
        b: &Var<T>,
        fwd: impl Fn(T, T) -> T,
        da: impl Fn(T, T, T) -> T + 'static,
        db: impl Fn(T, T, T) -> T + 'static,
    ) -> Result<Var<T>> {
        self.check(a, op)?;
        self.check(b, op)?;
        if a.dims() != b.dims() {
            return shape_err(op, format!("{:?} vs {:?}", a.dims(), b.dims()));
        }
        let data: Vec<T> = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| fwd(*x, *y))
            .collect();
        let out = Tensor::new(a.dims(), data)?;
        let record = self.any_tracked(&[a, b]);
        let (an, bn, len) = (a.node, b.node, out.len());
        let (ad, bd) = (a.shared(), b.shared());
        Ok(self.push(out, record, alloc::boxed::Box::new(move |g, store| {
            store.accumulate(an, len, |ga| {
                for i in 0..len {
                    ga[i] = ga[i] + da(g[i], ad[i], bd[i]);
                }
            });
            store.accumulate(bn, len, |gb| {
                for i in 0..len {
                    gb[i] = gb[i] + db(g[i], ad[i], bd[i]);
                }
            });
        })))
    }

    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.binary_elementwise("add", a, b, |x, y| x + y, |g, _, _| g, |g, _, _| g)
    }

    pub fn sub(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, |g, _, _| g, |g, _, _| -g)
    }

    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, |g, _, y| g * y, |g, x, _| g * x)
    }

    pub fn scale(&self, a: &Var<T>, c: T) -> Result<Var<T>> {
        self.check(a, "scale")?;
        let data: Vec<T> = a.data().iter().map(|x| *x * c).collect();
        let out = Tensor::new(a.dims(), data)?;
        let record = self.any_tracked(&[a]);
        let (an, len) = (a.node, out.len());
        Ok(self.push(out, record, alloc::boxed::Box::new(move |g, store| {
            store.accumulate(an, len, |ga| {
                for i in 0..len {
                    ga[i] = ga[i] + g[i] * c;
                }
            });
        })))
    }

    /// `x[r×c] + row[c]`, broadcast over rows.
    pub fn add_row_broadcast(&self, x: &Var<T>, row: &Var<T>) -> Result<Var<T>> {
        self.check(x, "add_row_broadcast")?;
        self.check(row, "add_row_broadcast")?;
        let [r, c] = two_dims(x, "add_row_broadcast")?;
        if row.value.len() != c {
            return shape_err(
                "add_row_broadcast",
                format!("{:?} vs row {:?}", x.dims(), row.dims()),
            );
        }
        let rd = row.data();
        let mut data = x.data().to_vec();
        for i in 0..r {
            let slice = &mut data[i * c..(i + 1) * c];
            for (v, b) in slice.iter_mut().zip(rd) {
                *v = *v + *b;
            }
        }
        let out = Tensor::new(x.dims(), data)?;
        let record = self.any_tracked(&[x, row]);
        let (xn, rn) = (x.node, row.node);
        Ok(self.push(out, record, alloc::boxed::Box::new(move |g, store| {
            store.accumulate(xn, r * c, |gx| {
                for i in 0..r * c {
                    gx[i] = gx[i] + g[i];
                }
            });
            store.accumulate(rn, c, |gr| {
                for i in 0..r {
                    for j in 0..c {
                        gr[j] = gr[j] + g[i * c + j];
                    }
                }
            });
        })))
    }

    /// Standard matrix product `[m×k]·[k×p]`.
    pub fn matmul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.check(a, "matmul")?;
        self.check(b, "matmul")?;
        let [m, k] = two_dims(a, "matmul")?;
        let [k2, p] = two_dims(b, "matmul")?;
        if k != k2 {
            return shape_err("matmul", format!("{:?} vs {:?}", a.dims(), b.dims()));
        }
        let data = matmul_nn(a.data(), b.data(), m, k, p);
        let out = Tensor::new(&[m, p], data)?;
        debug_check_finite(&out, "matmul");
        let record = self.any_tracked(&[a, b]);
        let (an, bn) = (a.node, b.node);
        let (ad, bd) = (a.shared(), b.shared());
        Ok(self.push(out, record, alloc::boxed::Box::new(move |g, store| {
            store.accumulate(an, m * k, |ga| {
                let da = matmul_nt(g, &bd, m, p, k);
                for (x, y) in ga.iter_mut().zip(&da) {
                    *x = *x + *y;
                }
            });
            store.accumulate(bn, k * p, |gb| {
                let db = matmul_tn(&ad, g, m, k, p);
                for (x, y) in gb.iter_mut().zip(&db) {
                    *x = *x + *y;
                }
            });
        })))
    }

    /// `[m×k]·[p×k]ᵀ` (used for attention scores).
    pub fn matmul_nt(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.check(a, "matmul_nt")?;
        self.check(b, "matmul_nt")?;
        let [m, k] = two_dims(a, "matmul_nt")?;
        let [p, k2] = two_dims(b, "matmul_nt")?;
        if k != k2 {
            return shape_err("matmul_nt", format!("{:?} vs {:?}ᵀ", a.dims(), b.dims()));
        }
        let data = matmul_nt(a.data(), b.data(), m, k, p);
        let out = Tensor::new(&[m, p], data)?;
        let record = self.any_tracked(&[a, b]);
        let (an, bn) = (a.node, b.node);
        let (ad, bd) = (a.shared(), b.shared());
        Ok(self.push(out, record, alloc::boxed::Box::new(move |g, store| {
            store.accumulate(an, m * k, |ga| {
                // dA = G · B
                let da = matmul_nn(g, &bd, m, p, k);
                for (x, y) in ga.iter_mut().zip(&da) {
                    *x = *x + *y;
                }
            });
            store.accumulate(bn, p * k, |gb| {
                // dB = Gᵀ · A
                let db = matmul_tn(g, &ad, m, p, k);
                for (x, y) in gb.iter_mut().zip(&db) {
                    *x = *x + *y;
                }
            });
        })))
    }

    /// Row-wise softmax, stabilized by max subtraction.
    pub fn softmax_rows(&self, x: &Var<T>) -> Result<Var<T>> {
        self.check(x, "softmax_rows")?;
        let [r, c] = two_dims(x, "softmax_rows")?;
        let data = softmax_rows_kernel(x.data(), r, c);
        let out = Tensor::new(&[r, c], data)?;
        debug_check_finite(&out, "softmax_rows");
        let record = self.any_tracked(&[x]);
        let xn = x.node;
        let yd = out.shared_data();
        Ok(self.push(out, record, alloc::boxed::Box::new(move |g, store| {
            store.accumulate(xn, r * c, |gx| {
                for i in 0..r {
                    let y = &yd[i * c..(i + 1) * c];
                    let go = &g[i * c..(i + 1) * c];
                    let mut dot = T::zero();
                    for (yv, gv) in y.iter().zip(go) {
                        dot = dot + *yv * *gv;
                    }
                    let row = &mut gx[i * c..(i + 1) * c];
                    for j in 0..c {
                        row[j] = row[j] + y[j] * (go[j] - dot);
                    }
                }
            });
        })))
    }

    pub fn relu(&self, x: &Var<T>) -> Result<Var<T>> {
        self.check(x, "relu")?;
        let data: Vec<T> = x.data().iter().map(|v| v.max(T::zero())).collect();
        let out = Tensor::new(x.dims(), data)?;
        let record = self.any_tracked(&[x]);
        let (xn, len) = (x.node, out.len());
        let xd = x.shared();
        Ok(self.push(out, record, alloc::boxed::Box::new(move |g, store| {
            store.accumulate(xn, len, |gx| {
                for i in 0..len {
                    if xd[i] > T::zero() {
                        gx[i] = gx[i] + g[i];
                    }
                }
            });
        })))
    }

    /// Per-row layer normalization with learnable scale and offset.
    pub fn layer_norm_rows(&self, x: &Var<T>, gamma: &Var<T>, beta: &Var<T>) -> Result<Var<T>> {
        self.check(x, "layer_norm")?;
        self.check(gamma, "layer_norm")?;
        self.check(beta, "layer_norm")?;
        let [r, c] = two_dims(x, "layer_norm")?;
        if gamma.value.len() != c || beta.value.len() != c {
            return shape_err(
                "layer_norm",
                format!("x {:?} vs gamma {:?}, beta {:?}", x.dims(), gamma.dims(), beta.dims()),
            );
        }
        let eps = s::<T>(1e-5);
        let xd = x.data();
        let gd = gamma.data();
        let bd = beta.data();
        let mut xhat = vec![T::zero(); r * c];
        let mut inv_std = vec![T::zero(); r];
        let mut data = vec![T::zero(); r * c];
        let cn = su::<T>(c);
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let mut mean = T::zero();
            for v in row {
                mean = mean + *v;
            }
            mean = mean / cn;
            let mut var = T::zero();
            for v in row {
                let d = *v - mean;
                var = var + d * d;
            }
            var = var / cn;
            let istd = T::one() / (var + eps).sqrt();
            inv_std[i] = istd;
            for j in 0..c {
                let xh = (row[j] - mean) * istd;
                xhat[i * c + j] = xh;
                data[i * c + j] = xh * gd[j] + bd[j];
            }
        }
        let out = Tensor::new(&[r, c], data)?;
        let record = self.any_tracked(&[x, gamma, beta]);
        let (xn, gn, bn) = (x.node, gamma.node, beta.node);
        let gamma_d = gamma.shared();
        let xhat = Arc::new(xhat);
        let inv_std = Arc::new(inv_std);
        let (xh2, is2) = (Arc::clone(&xhat), Arc::clone(&inv_std));
        Ok(self.push(out, record, alloc::boxed::Box::new(move |g, store| {
            store.accumulate(xn, r * c, |gx| {
                for i in 0..r {
                    let xh = &xh2[i * c..(i + 1) * c];
                    let go = &g[i * c..(i + 1) * c];
                    let mut sum_dy = T::zero();
                    let mut sum_dy_xh = T::zero();
                    for j in 0..c {
                        let dy = go[j] * gamma_d[j];
                        sum_dy = sum_dy + dy;
                        sum_dy_xh = sum_dy_xh + dy * xh[j];
                    }
                    let m1 = sum_dy / cn;
                    let m2 = sum_dy_xh / cn;
                    let row = &mut gx[i * c..(i + 1) * c];
                    for j in 0..c {
                        let dy = go[j] * gamma_d[j];
                        row[j] = row[j] + is2[i] * (dy - m1 - xh[j] * m2);
                    }
                }
            });
            store.accumulate(gn, c, |gg| {
                for i in 0..r {
                    for j in 0..c {
                        gg[j] = gg[j] + g[i * c + j] * xh2[i * c + j];
                    }
                }
            });
            store.accumulate(bn, c, |gb| {
                for i in 0..r {
                    for j in 0..c {
                        gb[j] = gb[j] + g[i * c + j];
                    }
                }
            });
        })))
    }

    /// Column slice `[r×c] -> [r×(c1-c0)]`.
    pub fn select_cols(&self, x: &Var<T>, c0: usize, c1: usize) -> Result<Var<T>> {
        self.check(x, "select_cols")?;
        let [r, c] = two_dims(x, "select_cols")?;
        if c0 >= c1 || c1 > c {
            return shape_err("select_cols", format!("range {c0}..{c1} of {c} columns"));
        }
        let w = c1 - c0;
        let xd = x.data();
        let mut data = vec![T::zero(); r * w];
        for i in 0..r {
            data[i * w..(i + 1) * w].copy_from_slice(&xd[i * c + c0..i * c + c1]);
        }
        let out = Tensor::new(&[r, w], data)?;
        let record = self.any_tracked(&[x]);
        let xn = x.node;
        Ok(self.push(out, record, alloc::boxed::Box::new(move |g, store| {
            store.accumulate(xn, r * c, |gx| {
                for i in 0..r {
                    for j in 0..w {
                        gx[i * c + c0 + j] = gx[i * c + c0 + j] + g[i * w + j];
                    }
                }
            });
        })))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&self, parts: &[Var<T>]) -> Result<Var<T>> {
        if parts.is_empty() {
            return shape_err("concat_cols", "no inputs".into());
        }
        let [r, _] = two_dims(&parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            self.check(p, "concat_cols")?;
            let [rp, cp] = two_dims(p, "concat_cols")?;
            if rp != r {
                return shape_err(
                    "concat_cols",
                    format!("{:?} vs {:?}", parts[0].dims(), p.dims()),
                );
            }
            widths.push(cp);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![T::zero(); r * total];
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let pd = p.data();
            for i in 0..r {
                data[i * total + off..i * total + off + w]
                    .copy_from_slice(&pd[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let out = Tensor::new(&[r, total], data)?;
        let record = self.is_recording() && parts.iter().any(|p| p.node.is_some());
        let nodes: Vec<Option<usize>> = parts.iter().map(|p| p.node).collect();
        let widths = Arc::new(widths);
        Ok(self.push(out, record, alloc::boxed::Box::new(move |g, store| {
            let mut off = 0;
            for (idx, &w) in widths.iter().enumerate() {
                store.accumulate(nodes[idx], r * w, |gp| {
                    for i in 0..r {
                        for j in 0..w {
                            gp[i * w + j] = gp[i * w + j] + g[i * total + off + j];
                        }
                    }
                });
                off += w;
            }
        })))
    }

    /// Per-frame 2D cross-correlation: `x[t,h,w,cin] ⊛ w[k,k,cin,cout]`.
    pub fn conv2d(
        &self,
        x: &Var<T>,
        weight: &Var<T>,
        bias: Option<&Var<T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<T>> {
        self.check(x, "conv2d")?;
        self.check(weight, "conv2d")?;
        let d = x.dims();
        if d.len() != 4 {
            return shape_err("conv2d", format!("input must be [t,h,w,c], got {d:?}"));
        }
        let (t, h, w, cin) = (d[0], d[1], d[2], d[3]);
        let wd = weight.dims();
        if wd.len() != 4 || wd[0] != wd[1] {
            return shape_err("conv2d", format!("kernel must be [k,k,cin,cout], got {wd:?}"));
        }
        let (k, cout) = (wd[0], wd[3]);
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv2d kernel size {k} must be odd")));
        }
        if wd[2] != cin {
            return shape_err("conv2d", format!("input {d:?} vs kernel {wd:?}"));
        }
        if h + 2 * pad < k || w + 2 * pad < k || stride == 0 {
            return shape_err(
                "conv2d",
                format!("kernel {k} with pad {pad}, stride {stride} exceeds input {h}x{w}"),
            );
        }
        if let Some(b) = bias {
            self.check(b, "conv2d")?;
            if b.value.len() != cout {
                return shape_err("conv2d", format!("bias {:?} vs cout {cout}", b.dims()));
            }
        }
        let (mut data, h_out, w_out) =
            conv2d_kernel(x.data(), t, h, w, cin, weight.data(), k, cout, stride, pad);
        if let Some(b) = bias {
            let bd = b.data();
            for px in data.chunks_mut(cout) {
                for (v, bv) in px.iter_mut().zip(bd) {
                    *v = *v + *bv;
                }
            }
        }
        let out = Tensor::new(&[t, h_out, w_out, cout], data)?;
        debug_check_finite(&out, "conv2d");
        let mut tracked: Vec<&Var<T>> = vec![x, weight];
        if let Some(b) = bias {
            tracked.push(b);
        }
        let record = self.any_tracked(&tracked);
        let (xn, wn, bn) = (x.node, weight.node, bias.and_then(|b| b.node));
        let (xd, wdat) = (x.shared(), weight.shared());
        Ok(self.push(out, record, alloc::boxed::Box::new(move |g, store| {
            store.accumulate(xn, t * h * w * cin, |gx| {
                conv2d_backward(
                    g, &xd, t, h, w, cin, &wdat, k, cout, stride, pad, h_out, w_out,
                    Some(gx), None,
                );
            });
            store.accumulate(wn, k * k * cin * cout, |gw| {
                conv2d_backward(
                    g, &xd, t, h, w, cin, &wdat, k, cout, stride, pad, h_out, w_out,
                    None, Some(gw),
                );
            });
            store.accumulate(bn, cout, |gb| {
                for px in g.chunks(cout) {
                    for (b, gv) in gb.iter_mut().zip(px) {
                        *b = *b + *gv;
                    }
                }
            });
        })))
    }

    /// Align-corners bilinear resize of `[t,h,w,d]` to `[t,h2,w2,d]`.
    pub fn bilinear_resize(&self, x: &Var<T>, h2: usize, w2: usize) -> Result<Var<T>> {
        self.check(x, "bilinear_resize")?;
        let d = x.dims();
        if d.len() != 4 {
            return shape_err("bilinear_resize", format!("need [t,h,w,d], got {d:?}"));
        }
        if h2 == 0 || w2 == 0 {
            return shape_err("bilinear_resize", format!("target {h2}x{w2}"));
        }
        let (t, h, w, ch) = (d[0], d[1], d[2], d[3]);
        let data = bilinear_resize_kernel(x.data(), t, h, w, ch, h2, w2);
        let out = Tensor::new(&[t, h2, w2, ch], data)?;
        let record = self.any_tracked(&[x]);
        let xn = x.node;
        Ok(self.push(out, record, alloc::boxed::Box::new(move |g, store| {
            store.accumulate(xn, t * h * w * ch, |gx| {
                bilinear_resize_backward(g, t, h, w, ch, h2, w2, gx);
            });
        })))
    }

    /// Mask-weighted spatial mean: `features[t,h,w,d]` pooled by
    /// `mask[t,h,w]` into a `[d]` vector. Soft masks are permitted;
    /// an all-zero mask is an error.
    pub fn masked_pool(&self, features: &Var<T>, mask: &Var<T>) -> Result<Var<T>> {
        self.check(features, "masked_pool")?;
        self.check(mask, "masked_pool")?;
        let fd = features.dims();
        if fd.len() != 4 {
            return shape_err("masked_pool", format!("features must be [t,h,w,d], got {fd:?}"));
        }
        let (t, h, w, d) = (fd[0], fd[1], fd[2], fd[3]);
        if mask.dims() != [t, h, w] {
            return shape_err(
                "masked_pool",
                format!("features {:?} vs mask {:?}", fd, mask.dims()),
            );
        }
        let md = mask.data();
        let xd = features.data();
        let total = su::<T>(0);
        let mut msum = total;
        for v in md {
            msum = msum + *v;
        }
        if msum == T::zero() {
            return Err(Error::DegenerateMask);
        }
        let n = t * h * w;
        let mut out = vec![T::zero(); d];
        for p in 0..n {
            let m = md[p];
            if m == T::zero() {
                continue;
            }
            let row = &xd[p * d..(p + 1) * d];
            for (o, v) in out.iter_mut().zip(row) {
                *o = *o + m * *v;
            }
        }
        for o in out.iter_mut() {
            *o = *o / msum;
        }
        let out = Tensor::new(&[d], out)?;
        let record = self.any_tracked(&[features, mask]);
        let (fnode, mnode) = (features.node, mask.node);
        let (xd, md) = (features.shared(), mask.shared());
        let od = out.shared_data();
        Ok(self.push(out, record, alloc::boxed::Box::new(move |g, store| {
            store.accumulate(fnode, n * d, |gx| {
                for p in 0..n {
                    let m = md[p] / msum;
                    if m == T::zero() {
                        continue;
                    }
                    let row = &mut gx[p * d..(p + 1) * d];
                    for (r, gv) in row.iter_mut().zip(g) {
                        *r = *r + m * *gv;
                    }
                }
            });
            store.accumulate(mnode, n, |gm| {
                for p in 0..n {
                    let row = &xd[p * d..(p + 1) * d];
                    let mut acc = T::zero();
                    for c in 0..d {
                        acc = acc + g[c] * (row[c] - od[c]);
                    }
                    gm[p] = gm[p] + acc / msum;
                }
            });
        })))
    }

    pub fn sum_all(&self, x: &Var<T>) -> Result<Var<T>> {
        self.check(x, "sum_all")?;
        let mut acc = T::zero();
        for v in x.data() {
            acc = acc + *v;
        }
        let out = Tensor::scalar(acc);
        let record = self.any_tracked(&[x]);
        let (xn, len) = (x.node, x.value.len());
        Ok(self.push(out, record, alloc::boxed::Box::new(move |g, store| {
            let g0 = g[0];
            store.accumulate(xn, len, |gx| {
                for v in gx.iter_mut() {
                    *v = *v + g0;
                }
            });
        })))
    }

    pub fn mean_all(&self, x: &Var<T>) -> Result<Var<T>> {
        let n = su::<T>(x.value.len());
        let sum = self.sum_all(x)?;
        self.scale(&sum, T::one() / n)
    }

    /// Mean binary cross entropy on logits against constant targets.
    pub fn bce_logits_mean(&self, logits: &Var<T>, targets: &Tensor<T>) -> Result<Var<T>> {
        self.check(logits, "bce_logits_mean")?;
        if logits.dims() != targets.dims() {
            return shape_err(
                "bce_logits_mean",
                format!("{:?} vs {:?}", logits.dims(), targets.dims()),
            );
        }
        let n = logits.value.len();
        let nt = su::<T>(n);
        let zd = logits.data();
        let td = targets.data();
        let mut acc = T::zero();
        for i in 0..n {
            acc = acc + softplus(zd[i]) - zd[i] * td[i];
        }
        let out = Tensor::scalar(acc / nt);
        debug_check_finite(&out, "bce_logits_mean");
        let record = self.any_tracked(&[logits]);
        let zn = logits.node;
        let zd = logits.shared();
        let td = targets.shared_data();
        Ok(self.push(out, record, alloc::boxed::Box::new(move |g, store| {
            let g0 = g[0] / nt;
            store.accumulate(zn, n, |gz| {
                for i in 0..n {
                    gz[i] = gz[i] + g0 * (sigmoid_kernel(zd[i]) - td[i]);
                }
            });
        })))
    }

    /// Mean focal loss on logits against constant binary targets.
    pub fn focal_loss_mean(
        &self,
        logits: &Var<T>,
        targets: &Tensor<T>,
        alpha: T,
        gamma: T,
    ) -> Result<Var<T>> {
        self.check(logits, "focal_loss_mean")?;
        if logits.dims() != targets.dims() {
            return shape_err(
                "focal_loss_mean",
                format!("{:?} vs {:?}", logits.dims(), targets.dims()),
            );
        }
        let n = logits.value.len();
        let nt = su::<T>(n);
        let zd = logits.data();
        let td = targets.data();
        let mut acc = T::zero();
        for i in 0..n {
            let z = zd[i];
            let p = sigmoid_kernel(z);
            let u = sigmoid_kernel(-z);
            let ln_p = -softplus(-z);
            let ln_u = -softplus(z);
            if td[i] > s::<T>(0.5) {
                acc = acc - alpha * u.powf(gamma) * ln_p;
            } else {
                acc = acc - (T::one() - alpha) * p.powf(gamma) * ln_u;
            }
        }
        let out = Tensor::scalar(acc / nt);
        debug_check_finite(&out, "focal_loss_mean");
        let record = self.any_tracked(&[logits]);
        let zn = logits.node;
        let zd = logits.shared();
        let td = targets.shared_data();
        Ok(self.push(out, record, alloc::boxed::Box::new(move |g, store| {
            let g0 = g[0] / nt;
            store.accumulate(zn, n, |gz| {
                for i in 0..n {
                    let z = zd[i];
                    let p = sigmoid_kernel(z);
                    let u = sigmoid_kernel(-z);
                    let ln_p = -softplus(-z);
                    let ln_u = -softplus(z);
                    let d = if td[i] > s::<T>(0.5) {
                        // d/dz of -alpha (1-p)^gamma ln p
                        alpha * (gamma * u.powf(gamma) * p * ln_p - u.powf(gamma + T::one()))
                    } else {
                        (T::one() - alpha)
                            * (p.powf(gamma + T::one())
                                - gamma * p.powf(gamma) * u * ln_u)
                    };
                    gz[i] = gz[i] + g0 * d;
                }
            });
        })))
    }

    /// Soft dice loss on logits: `1 - (2Σpg+ε)/(Σp+Σg+ε)`.
    pub fn dice_loss(&self, logits: &Var<T>, targets: &Tensor<T>) -> Result<Var<T>> {
        self.check(logits, "dice_loss")?;
        if logits.dims() != targets.dims() {
            return shape_err(
                "dice_loss",
                format!("{:?} vs {:?}", logits.dims(), targets.dims()),
            );
        }
        let eps = s::<T>(1e-7);
        let n = logits.value.len();
        let zd = logits.data();
        let td = targets.data();
        let mut inter = T::zero();
        let mut psum = T::zero();
        let mut gsum = T::zero();
        for i in 0..n {
            let p = sigmoid_kernel(zd[i]);
            inter = inter + p * td[i];
            psum = psum + p;
            gsum = gsum + td[i];
        }
        let denom = psum + gsum + eps;
        let out = Tensor::scalar(T::one() - (inter + inter + eps) / denom);
        let record = self.any_tracked(&[logits]);
        let zn = logits.node;
        let zd = logits.shared();
        let td = targets.shared_data();
        Ok(self.push(out, record, alloc::boxed::Box::new(move |g, store| {
            let g0 = g[0];
            let num = inter + inter + eps;
            store.accumulate(zn, n, |gz| {
                for i in 0..n {
                    let p = sigmoid_kernel(zd[i]);
                    // d/dp of -(2I+eps)/(S+eps): quotient rule
                    let dp = -((td[i] + td[i]) * denom - num) / (denom * denom);
                    gz[i] = gz[i] + g0 * dp * p * (T::one() - p);
                }
            });
        })))
    }

    /// Generic gather: `out[i] = x[idx[i]]` over flat indices.
    pub fn permute_gather(
        &self,
        x: &Var<T>,
        idx: Arc<Vec<usize>>,
        out_dims: &[usize],
    ) -> Result<Var<T>> {
        self.check(x, "permute_gather")?;
        let n_out: usize = out_dims.iter().product();
        if idx.len() != n_out {
            return shape_err(
                "permute_gather",
                format!("index count {} vs output volume {n_out}", idx.len()),
            );
        }
        let xd = x.data();
        let len = xd.len();
        if let Some(&bad) = idx.iter().find(|&&i| i >= len) {
            return shape_err("permute_gather", format!("index {bad} out of {len}"));
        }
        let data: Vec<T> = idx.iter().map(|&i| xd[i]).collect();
        let out = Tensor::new(out_dims, data)?;
        let record = self.any_tracked(&[x]);
        let xn = x.node;
        let idx2 = Arc::clone(&idx);
        Ok(self.push(out, record, alloc::boxed::Box::new(move |g, store| {
            store.accumulate(xn, len, |gx| {
                for (i, &src) in idx2.iter().enumerate() {
                    gx[src] = gx[src] + g[i];
                }
            });
        })))
    }

    /// Gathers the given rows of a matrix.
    pub fn gather_rows(&self, x: &Var<T>, rows: &[usize]) -> Result<Var<T>> {
        let [_, c] = two_dims(x, "gather_rows")?;
        let mut idx = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            for j in 0..c {
                idx.push(r * c + j);
            }
        }
        self.permute_gather(x, Arc::new(idx), &[rows.len(), c])
    }

    /// Rows `rows[j]` of `x` replaced by row `j` of `sub`; other rows pass
    /// through untouched.
    pub fn row_splice(&self, x: &Var<T>, sub: &Var<T>, rows: Arc<Vec<usize>>) -> Result<Var<T>> {
        self.check(x, "row_splice")?;
        self.check(sub, "row_splice")?;
        let [r, c] = two_dims(x, "row_splice")?;
        let [sr, sc] = two_dims(sub, "row_splice")?;
        if sc != c || sr != rows.len() {
            return shape_err(
                "row_splice",
                format!("{:?} vs sub {:?} with {} rows", x.dims(), sub.dims(), rows.len()),
            );
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return shape_err("row_splice", format!("row {bad} out of {r}"));
        }
        let mut data = x.data().to_vec();
        let sd = sub.data();
        for (j, &row) in rows.iter().enumerate() {
            data[row * c..(row + 1) * c].copy_from_slice(&sd[j * c..(j + 1) * c]);
        }
        let out = Tensor::new(&[r, c], data)?;
        let record = self.any_tracked(&[x, sub]);
        let (xn, sn) = (x.node, sub.node);
        let rows2 = Arc::clone(&rows);
        Ok(self.push(out, record, alloc::boxed::Box::new(move |g, store| {
            store.accumulate(sn, sr * c, |gs| {
                for (j, &row) in rows2.iter().enumerate() {
                    for k in 0..c {
                        gs[j * c + k] = gs[j * c + k] + g[row * c + k];
                    }
                }
            });
            store.accumulate(xn, r * c, |gx| {
                let mut replaced = vec![false; r];
                for &row in rows2.iter() {
                    replaced[row] = true;
                }
                for i in 0..r {
                    if replaced[i] {
                        continue;
                    }
                    for k in 0..c {
                        gx[i * c + k] = gx[i * c + k] + g[i * c + k];
                    }
                }
            });
        })))
    }
}

pub(crate) fn two_dims<T: Scalar>(v: &Var<T>, op: &'static str) -> Result<[usize; 2]> {
    let d = v.dims();
    if d.len() != 2 {
        return Err(Error::Shape {
            op,
            detail: format!("expected a matrix, got {d:?}"),
        });
    }
    Ok([d[0], d[1]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{grad_check, grad_check_tampered, grad_check_unary};
    use rand::Rng;

    fn randt(dims: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = crate::rng::stream(seed, "ops-test", 0);
        Tensor::randn(dims, 1.0, &mut rng)
    }

    /// Weighted-sum scalarizer so gradients through the tested op are
    /// non-trivial.
    fn weighted_sum(g: &Graph<f64>, y: &Var<f64>, seed: u64) -> Var<f64> {
        let w = g.constant(randt(y.dims(), seed ^ 0xabcd));
        let prod = g.mul(y, &w).unwrap();
        g.sum_all(&prod).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let g = Graph::eval();
        let i2 = g.constant(Tensor::new(&[2, 2], vec![1., 0., 0., 1.]).unwrap());
        let v = g.constant(Tensor::new(&[2, 1], vec![3., 4.]).unwrap());
        let out = g.matmul(&i2, &v).unwrap();
        assert_eq!(out.data(), &[3., 4.]);

        let a = g.constant(Tensor::new(&[1, 2], vec![1., 2.]).unwrap());
        let out = g.matmul(&a, &v).unwrap();
        assert_eq!(out.data(), &[11.]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let a = randt(&[5, 4], 1);
        let b = randt(&[4, 3], 2);
        let g = Graph::eval();
        let out = g
            .matmul(&g.constant(a.clone()), &g.constant(b.clone()))
            .unwrap();
        // independent naive oracle
        let mut expect = vec![0.0f64; 5 * 3];
        for i in 0..5 {
            for j in 0..3 {
                for k in 0..4 {
                    expect[i * 3 + j] += a.data()[i * 4 + k] * b.data()[k * 3 + j];
                }
            }
        }
        for (o, e) in out.data().iter().zip(&expect) {
            assert!((o - e).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let g = Graph::eval();
        let a = g.constant(Tensor::<f64>::zeros(&[2, 3]));
        let b = g.constant(Tensor::<f64>::zeros(&[4, 2]));
        let err = g.matmul(&a, &b).unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_stability_and_oracle() {
        let g = Graph::eval();
        let x = g.constant(Tensor::new(&[1, 3], vec![0f64, 0., 0.]).unwrap());
        let y = g.softmax_rows(&x).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let x = g.constant(Tensor::new(&[1, 2], vec![1000f64, 0.]).unwrap());
        let y = g.softmax_rows(&x).unwrap();
        assert!(y.value.all_finite());
        assert!((y.data()[0] - 1.0).abs() < 1e-12);
        assert!(y.data()[1] < 1e-12);

        let x = g.constant(Tensor::new(&[1, 3], vec![1., 2., 3.]).unwrap());
        let y = g.softmax_rows(&x).unwrap();
        let z: f64 = (1f64).exp() + (2f64).exp() + (3f64).exp();
        for (i, v) in y.data().iter().enumerate() {
            assert!((v - ((i + 1) as f64).exp() / z).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_even_at_large_magnitude() {
        let mut rng = crate::rng::stream(9, "softmax", 0);
        for _ in 0..20 {
            let x = Tensor::<f64>::from_fn(&[4, 6], |_| rng.gen_range(-1e4..1e4));
            let g = Graph::eval();
            let y = g.softmax_rows(&g.constant(x)).unwrap();
            for r in 0..4 {
                let sum: f64 = y.data()[r * 6..(r + 1) * 6].iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn bilinear_constant_identity_and_closed_form() {
        let g = Graph::eval();
        let c = g.constant(Tensor::<f64>::filled(&[1, 2, 2, 1], 5.0));
        let up = g.bilinear_resize(&c, 7, 3).unwrap();
        assert!(up.data().iter().all(|&v| (v - 5.0).abs() < 1e-15));

        // 2x2 grid [[0,1],[2,3]] to 3x3, align-corners: center is the mean
        let x = g.constant(Tensor::new(&[1, 2, 2, 1], vec![0., 1., 2., 3.]).unwrap());
        let y = g.bilinear_resize(&x, 3, 3).unwrap();
        let expect = [0., 0.5, 1., 1., 1.5, 2., 2., 2.5, 3.];
        for (a, b) in y.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }

        let r = randt(&[2, 3, 4, 2], 3);
        let same = g.bilinear_resize(&g.constant(r.clone()), 3, 4).unwrap();
        assert!(same.value.bits_eq(&r));
    }

    #[test]
    fn masked_pool_examples() {
        let g = Graph::eval();
        let f = randt(&[1, 2, 2, 3], 4);
        let ones = g.constant(Tensor::<f64>::filled(&[1, 2, 2], 1.0));
        let pooled = g.masked_pool(&g.constant(f.clone()), &ones).unwrap();
        for c in 0..3 {
            let mean: f64 = (0..4).map(|p| f.data()[p * 3 + c]).sum::<f64>() / 4.0;
            assert!((pooled.data()[c] - mean).abs() < 1e-12);
        }

        let one_px = g.constant(Tensor::new(&[1, 2, 2], vec![0., 0., 1., 0.]).unwrap());
        let pooled = g.masked_pool(&g.constant(f.clone()), &one_px).unwrap();
        assert_eq!(pooled.data(), &f.data()[2 * 3..3 * 3]);

        // soft mask equals the scalar-loop oracle
        let soft = Tensor::new(&[1, 2, 2], vec![0.25, 0.0, 0.5, 1.0]).unwrap();
        let pooled = g
            .masked_pool(&g.constant(f.clone()), &g.constant(soft.clone()))
            .unwrap();
        let wsum: f64 = soft.data().iter().sum();
        for c in 0..3 {
            let mut acc = 0.0;
            for p in 0..4 {
                acc += soft.data()[p] * f.data()[p * 3 + c];
            }
            assert!((pooled.data()[c] - acc / wsum).abs() < 1e-12);
        }

        let zero = g.constant(Tensor::<f64>::zeros(&[1, 2, 2]));
        assert!(matches!(
            g.masked_pool(&g.constant(f), &zero),
            Err(Error::DegenerateMask)
        ));
    }

    #[test]
    fn cosine_similarity_examples() {
        let u: [f64; 3] = [1.0, 2.0, -3.0];
        assert!((cosine_similarity(&u, &u).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = u.iter().map(|v| -v).collect();
        assert!((cosine_similarity(&u, &neg).unwrap() + 1.0).abs() < 1e-12);
        let scaled: Vec<f64> = u.iter().map(|v| 7.3 * v).collect();
        assert!((cosine_similarity(&u, &scaled).unwrap() - 1.0).abs() < 1e-12);
        let zero = [0.0f64; 3];
        assert!(matches!(
            cosine_similarity(&u, &zero),
            Err(Error::DegenerateVector)
        ));
    }

    #[test]
    fn cosine_scale_invariance_property() {
        let mut rng = crate::rng::stream(11, "cos", 0);
        for _ in 0..50 {
            let u: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let v: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let c: f64 = rng.gen_range(0.01..100.0);
            let scaled: Vec<f64> = v.iter().map(|x| c * x).collect();
            let (Ok(a), Ok(b)) = (cosine_similarity(&u, &v), cosine_similarity(&u, &scaled))
            else {
                continue;
            };
            assert!((a - b).abs() < 1e-12);
            assert!((-1.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn conv2d_identity_and_average() {
        let g = Graph::eval();
        let x = randt(&[1, 4, 4, 2], 5);
        // 1x1 kernel = identity over channels
        let ident = Tensor::new(&[1, 1, 2, 2], vec![1., 0., 0., 1.]).unwrap();
        let y = g
            .conv2d(&g.constant(x.clone()), &g.constant(ident), None, 1, 0)
            .unwrap();
        assert!(y.value.bits_eq(&x));

        // 3x3 averaging kernel on a constant field keeps the constant
        let c = g.constant(Tensor::<f64>::filled(&[1, 5, 5, 1], 2.5));
        let avg = Tensor::<f64>::filled(&[3, 3, 1, 1], 1.0 / 9.0);
        let y = g.conv2d(&c, &g.constant(avg), None, 1, 1).unwrap();
        // interior pixels only: zero padding thins the border
        for yy in 1..4 {
            for xx in 1..4 {
                assert!((y.data()[(yy * 5 + xx)] - 2.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv2d_matches_six_loop_oracle() {
        let x = randt(&[2, 5, 4, 3], 6);
        let k = randt(&[3, 3, 3, 2], 7);
        let g = Graph::eval();
        let y = g
            .conv2d(&g.constant(x.clone()), &g.constant(k.clone()), None, 1, 1)
            .unwrap();
        assert_eq!(y.dims(), &[2, 5, 4, 2]);
        let (t, h, w, cin, cout, ks) = (2usize, 5usize, 4usize, 3usize, 2usize, 3usize);
        for ti in 0..t {
            for yo in 0..h {
                for xo in 0..w {
                    for co in 0..cout {
                        let mut acc = 0.0;
                        for dy in 0..ks {
                            for dx in 0..ks {
                                let yi = yo as isize + dy as isize - 1;
                                let xi = xo as isize + dx as isize - 1;
                                if yi < 0 || yi >= h as isize || xi < 0 || xi >= w as isize {
                                    continue;
                                }
                                for ci in 0..cin {
                                    acc += x.data()
                                        [((ti * h + yi as usize) * w + xi as usize) * cin + ci]
                                        * k.data()[((dy * ks + dx) * cin + ci) * cout + co];
                                }
                            }
                        }
                        let got = y.data()[((ti * h + yo) * w + xo) * cout + co];
                        assert!((got - acc).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn conv2d_stride_two_halves_extent() {
        let g = Graph::eval();
        let x = randt(&[1, 8, 8, 1], 8);
        let k = randt(&[3, 3, 1, 4], 9);
        let y = g.conv2d(&g.constant(x), &g.constant(k), None, 2, 1).unwrap();
        assert_eq!(y.dims(), &[1, 4, 4, 4]);
    }

    #[test]
    fn gather_splice_and_select_round_trip() {
        let g = Graph::eval();
        let x = randt(&[4, 3], 10);
        let sub = g.gather_rows(&g.constant(x.clone()), &[1, 3]).unwrap();
        assert_eq!(&sub.data()[0..3], &x.data()[3..6]);
        assert_eq!(&sub.data()[3..6], &x.data()[9..12]);

        let spliced = g
            .row_splice(
                &g.constant(x.clone()),
                &sub,
                Arc::new(vec![0, 2]),
            )
            .unwrap();
        assert_eq!(&spliced.data()[0..3], &x.data()[3..6]);
        assert_eq!(&spliced.data()[3..6], &x.data()[3..6]);

        let cols = g.select_cols(&g.constant(x.clone()), 1, 3).unwrap();
        assert_eq!(cols.dims(), &[4, 2]);
        assert_eq!(cols.data()[0], x.data()[1]);
    }

    // --- gradient checks: every differentiable op, extents <= 8, h = 1e-4 ---

    const H: f64 = 1e-4;
    const TOL: f64 = 1e-4;

    #[test]
    fn grad_sum_of_squares_is_2x() {
        let x = randt(&[3, 3], 20);
        let err = grad_check_unary(
            |g, v| {
                let sq = g.mul(v, v)?;
                g.sum_all(&sq)
            },
            &x,
            H,
        )
        .unwrap();
        assert!(err < 1e-8, "rel err {err}");
    }

    #[test]
    fn grad_softmax_sum_is_constant() {
        // row sums are constant: analytic gradient is exactly zero and the
        // finite difference only sees rounding noise against the 1e-8 floor
        let x = randt(&[2, 4], 21);
        let err = grad_check_unary(
            |g, v| {
                let y = g.softmax_rows(v)?;
                g.sum_all(&y)
            },
            &x,
            H,
        )
        .unwrap();
        assert!(err < 1e-3, "rel err {err}");
    }

    #[test]
    fn grad_check_detects_injected_fault() {
        let x = randt(&[2, 2], 22);
        let err = grad_check_tampered(
            |g, vs| {
                let sq = g.mul(&vs[0], &vs[0])?;
                g.sum_all(&sq)
            },
            core::slice::from_ref(&x),
            H,
            Some((0, 1, 0.5)),
        )
        .unwrap();
        assert!(err > 1e-2, "fault must be reported, got {err}");
    }

    #[test]
    fn grad_elementwise_and_broadcast_ops() {
        let a = randt(&[3, 4], 23);
        let b = randt(&[3, 4], 24);
        let err = grad_check(
            |g, vs| {
                let sum = g.add(&vs[0], &vs[1])?;
                let diff = g.sub(&sum, &vs[1])?;
                let prod = g.mul(&diff, &vs[1])?;
                let scaled = g.scale(&prod, 1.7)?;
                Ok(weighted_sum(g, &scaled, 1))
            },
            &[a.clone(), b],
            H,
        )
        .unwrap();
        assert!(err < TOL, "rel err {err}");

        let row = randt(&[4], 25);
        let err = grad_check(
            |g, vs| {
                let y = g.add_row_broadcast(&vs[0], &vs[1])?;
                Ok(weighted_sum(g, &y, 2))
            },
            &[a, row],
            H,
        )
        .unwrap();
        assert!(err < TOL, "rel err {err}");
    }

    #[test]
    fn grad_matmul_both_orientations() {
        let a = randt(&[3, 4], 26);
        let b = randt(&[4, 2], 27);
        let err = grad_check(
            |g, vs| {
                let y = g.matmul(&vs[0], &vs[1])?;
                Ok(weighted_sum(g, &y, 3))
            },
            &[a.clone(), b],
            H,
        )
        .unwrap();
        assert!(err < TOL, "rel err {err}");

        let bt = randt(&[2, 4], 28);
        let err = grad_check(
            |g, vs| {
                let y = g.matmul_nt(&vs[0], &vs[1])?;
                Ok(weighted_sum(g, &y, 4))
            },
            &[a, bt],
            H,
        )
        .unwrap();
        assert!(err < TOL, "rel err {err}");
    }

    #[test]
    fn grad_softmax_relu_layernorm() {
        let x = randt(&[3, 5], 29);
        let err = grad_check_unary(
            |g, v| {
                let y = g.softmax_rows(v)?;
                Ok(weighted_sum(g, &y, 5))
            },
            &x,
            H,
        )
        .unwrap();
        assert!(err < TOL, "softmax rel err {err}");

        let err = grad_check_unary(
            |g, v| {
                let y = g.relu(v)?;
                Ok(weighted_sum(g, &y, 6))
            },
            &x,
            H,
        )
        .unwrap();
        assert!(err < TOL, "relu rel err {err}");

        let gamma = randt(&[5], 30);
        let beta = randt(&[5], 31);
        let err = grad_check(
            |g, vs| {
                let y = g.layer_norm_rows(&vs[0], &vs[1], &vs[2])?;
                Ok(weighted_sum(g, &y, 7))
            },
            &[x, gamma, beta],
            H,
        )
        .unwrap();
        assert!(err < TOL, "layer_norm rel err {err}");
    }

    #[test]
    fn grad_structural_ops() {
        let x = randt(&[5, 4], 32);
        let err = grad_check_unary(
            |g, v| {
                let cols = g.select_cols(v, 1, 3)?;
                let rows = g.gather_rows(&cols, &[0, 2, 4])?;
                Ok(weighted_sum(g, &rows, 8))
            },
            &x,
            H,
        )
        .unwrap();
        assert!(err < TOL, "select/gather rel err {err}");

        let sub = randt(&[2, 4], 33);
        let err = grad_check(
            |g, vs| {
                let y = g.row_splice(&vs[0], &vs[1], Arc::new(vec![1, 3]))?;
                Ok(weighted_sum(g, &y, 9))
            },
            &[x.clone(), sub],
            H,
        )
        .unwrap();
        assert!(err < TOL, "row_splice rel err {err}");

        let parts = [randt(&[3, 2], 34), randt(&[3, 3], 35)];
        let err = grad_check(
            |g, vs| {
                let y = g.concat_cols(vs)?;
                Ok(weighted_sum(g, &y, 10))
            },
            &parts,
            H,
        )
        .unwrap();
        assert!(err < TOL, "concat rel err {err}");
    }

    #[test]
    fn grad_conv_and_resize() {
        let x = randt(&[1, 4, 4, 2], 36);
        let k = randt(&[3, 3, 2, 2], 37);
        let bias = randt(&[2], 38);
        let err = grad_check(
            |g, vs| {
                let y = g.conv2d(&vs[0], &vs[1], Some(&vs[2]), 1, 1)?;
                Ok(weighted_sum(g, &y, 11))
            },
            &[x.clone(), k, bias],
            H,
        )
        .unwrap();
        assert!(err < TOL, "conv2d rel err {err}");

        let err = grad_check_unary(
            |g, v| {
                let y = g.bilinear_resize(v, 7, 5)?;
                Ok(weighted_sum(g, &y, 12))
            },
            &x,
            H,
        )
        .unwrap();
        assert!(err < TOL, "resize up rel err {err}");

        let err = grad_check_unary(
            |g, v| {
                let y = g.bilinear_resize(v, 2, 3)?;
                Ok(weighted_sum(g, &y, 13))
            },
            &x,
            H,
        )
        .unwrap();
        assert!(err < TOL, "resize down rel err {err}");
    }

    #[test]
    fn grad_masked_pool() {
        let f = randt(&[1, 3, 3, 4], 39);
        let m = Tensor::new(
            &[1, 3, 3],
            vec![0.2, 0.0, 1.0, 0.5, 0.9, 0.0, 0.0, 0.3, 0.7],
        )
        .unwrap();
        let err = grad_check(
            |g, vs| {
                let y = g.masked_pool(&vs[0], &vs[1])?;
                Ok(weighted_sum(g, &y, 14))
            },
            &[f, m],
            H,
        )
        .unwrap();
        assert!(err < TOL, "masked_pool rel err {err}");
    }

    #[test]
    fn grad_losses() {
        let z = randt(&[2, 3, 3], 40);
        let t = Tensor::<f64>::from_fn(&[2, 3, 3], |i| if i % 3 == 0 { 1.0 } else { 0.0 });

        let err = grad_check_unary(|g, v| g.bce_logits_mean(v, &t), &z, H).unwrap();
        assert!(err < TOL, "bce rel err {err}");

        let err =
            grad_check_unary(|g, v| g.focal_loss_mean(v, &t, 0.25, 2.0), &z, H).unwrap();
        assert!(err < TOL, "focal rel err {err}");

        let err = grad_check_unary(|g, v| g.dice_loss(v, &t), &z, H).unwrap();
        assert!(err < TOL, "dice rel err {err}");
    }

    #[test]
    fn backward_accumulates_through_shared_inputs() {
        // y = x·x (matmul with itself) exercises multi-parent accumulation
        let x = randt(&[3, 3], 41);
        let err = grad_check_unary(
            |g, v| {
                let y = g.matmul(v, v)?;
                Ok(weighted_sum(g, &y, 15))
            },
            &x,
            H,
        )
        .unwrap();
        assert!(err < TOL, "rel err {err}");
    }

    #[test]
    fn eval_graph_records_nothing() {
        let g = Graph::<f64>::eval();
        let a = g.constant(randt(&[2, 2], 42));
        let b = g.constant(randt(&[2, 2], 43));
        let _ = g.matmul(&a, &b).unwrap();
        assert_eq!(g.node_count(), 0);
    }

    #[test]
    fn cross_graph_use_is_rejected() {
        let g1 = Graph::<f64>::new();
        let g2 = Graph::<f64>::new();
        let a = g1.var(randt(&[2, 2], 44));
        let b = g2.var(randt(&[2, 2], 45));
        assert!(g1.matmul(&a, &b).is_err());
    }

    #[test]
    fn finite_outputs_on_finite_inputs() {
        let mut rng = crate::rng::stream(46, "finite", 0);
        for _ in 0..5 {
            let g = Graph::<f64>::new();
            let x = g.var(Tensor::from_fn(&[3, 4], |_| rng.gen_range(-100.0..100.0)));
            let w = g.var(Tensor::from_fn(&[4, 4], |_| rng.gen_range(-10.0..10.0)));
            let y = g.matmul(&x, &w).unwrap();
            let sm = g.softmax_rows(&y).unwrap();
            let r = g.relu(&sm).unwrap();
            assert!(r.value.all_finite());
        }
    }
}

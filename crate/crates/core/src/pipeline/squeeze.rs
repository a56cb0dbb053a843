//! Hypercorrelation squeeze: separable emulation of 4D convolution. Each
//! level's correlation tensor is filtered over the query spatial dims, then
//! the support spatial dims, interleaved twice with a nonlinearity, then
//! mean-pooled over support positions and projected to the decoder width
//! with a 1×1 convolution.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::msdecode::{FeaturePyramid, LevelDims};
use crate::scalar::{su, Scalar};
use crate::tensor::{Graph, Tensor, Var};

use super::correlate::CorrelationPyramid;

/// Which spatial pair a correlation conv filters over.
#[derive(Clone, Copy, PartialEq, Eq)]
enum CorrAxes {
    Query,
    Support,
}

struct CorrShape {
    t: usize,
    hq: usize,
    wq: usize,
    hs: usize,
    ws: usize,
    g: usize,
}

fn corr_shape<T: Scalar>(v: &Var<T>, op: &'static str) -> Result<CorrShape> {
    let d = v.dims();
    if d.len() != 6 {
        return Err(Error::Shape {
            op,
            detail: format!("expected [t,hq,wq,hs,ws,g], got {d:?}"),
        });
    }
    Ok(CorrShape {
        t: d[0],
        hq: d[1],
        wq: d[2],
        hs: d[3],
        ws: d[4],
        g: d[5],
    })
}

#[allow(clippy::too_many_arguments)]
fn corr_conv_forward<T: Scalar>(
    x: &[T],
    sh: &CorrShape,
    w: &[T],
    b: &[T],
    k: usize,
    gout: usize,
    axes: CorrAxes,
) -> Vec<T> {
    let pad = (k - 1) / 2;
    let (gin, hs, ws) = (sh.g, sh.hs, sh.ws);
    let s_count = hs * ws;
    let nq = sh.t * sh.hq * sh.wq;
    let mut out = vec![T::zero(); nq * s_count * gout];
    for (px, chunk) in out.chunks_mut(gout).enumerate() {
        let _ = px;
        chunk.copy_from_slice(b);
    }
    match axes {
        CorrAxes::Query => {
            for ti in 0..sh.t {
                for yq in 0..sh.hq {
                    for xq in 0..sh.wq {
                        let obase = ((ti * sh.hq + yq) * sh.wq + xq) * s_count * gout;
                        for dy in 0..k {
                            let yi = yq as isize + dy as isize - pad as isize;
                            if yi < 0 || yi >= sh.hq as isize {
                                continue;
                            }
                            for dx in 0..k {
                                let xi = xq as isize + dx as isize - pad as isize;
                                if xi < 0 || xi >= sh.wq as isize {
                                    continue;
                                }
                                let ibase = ((ti * sh.hq + yi as usize) * sh.wq
                                    + xi as usize)
                                    * s_count
                                    * gin;
                                let wbase = (dy * k + dx) * gin * gout;
                                if gin == 1 && gout == 1 {
                                    let wv = w[wbase];
                                    let src = &x[ibase..ibase + s_count];
                                    let dst = &mut out[obase..obase + s_count];
                                    for (o, v) in dst.iter_mut().zip(src) {
                                        *o = *o + wv * *v;
                                    }
                                } else {
                                    for sp in 0..s_count {
                                        for gi in 0..gin {
                                            let xv = x[ibase + sp * gin + gi];
                                            if xv == T::zero() {
                                                continue;
                                            }
                                            let wrow = &w[wbase + gi * gout
                                                ..wbase + (gi + 1) * gout];
                                            let orow = &mut out[obase + sp * gout
                                                ..obase + (sp + 1) * gout];
                                            for (o, wv) in orow.iter_mut().zip(wrow) {
                                                *o = *o + xv * *wv;
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
        CorrAxes::Support => {
            for q in 0..nq {
                let ibase_q = q * s_count * gin;
                let obase_q = q * s_count * gout;
                for ys in 0..hs {
                    for xs in 0..ws {
                        let obase = obase_q + (ys * ws + xs) * gout;
                        for dy in 0..k {
                            let yi = ys as isize + dy as isize - pad as isize;
                            if yi < 0 || yi >= hs as isize {
                                continue;
                            }
                            for dx in 0..k {
                                let xi = xs as isize + dx as isize - pad as isize;
                                if xi < 0 || xi >= ws as isize {
                                    continue;
                                }
                                let ibase =
                                    ibase_q + ((yi as usize) * ws + xi as usize) * gin;
                                let wbase = (dy * k + dx) * gin * gout;
                                for gi in 0..gin {
                                    let xv = x[ibase + gi];
                                    if xv == T::zero() {
                                        continue;
                                    }
                                    for go in 0..gout {
                                        out[obase + go] = out[obase + go]
                                            + xv * w[wbase + gi * gout + go];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn corr_conv_backward<T: Scalar>(
    grad_out: &[T],
    x: &[T],
    sh: &CorrShape,
    w: &[T],
    k: usize,
    gout: usize,
    axes: CorrAxes,
    grad_x: Option<&mut [T]>,
    grad_w: Option<&mut [T]>,
    grad_b: Option<&mut [T]>,
) {
    let pad = (k - 1) / 2;
    let (gin, hs, ws) = (sh.g, sh.hs, sh.ws);
    let s_count = hs * ws;
    let nq = sh.t * sh.hq * sh.wq;
    if let Some(gb) = grad_b {
        for chunk in grad_out.chunks(gout) {
            for (b, g) in gb.iter_mut().zip(chunk) {
                *b = *b + *g;
            }
        }
    }
    let mut gx = grad_x;
    let mut gw = grad_w;
    match axes {
        CorrAxes::Query => {
            for ti in 0..sh.t {
                for yq in 0..sh.hq {
                    for xq in 0..sh.wq {
                        let obase = ((ti * sh.hq + yq) * sh.wq + xq) * s_count * gout;
                        for dy in 0..k {
                            let yi = yq as isize + dy as isize - pad as isize;
                            if yi < 0 || yi >= sh.hq as isize {
                                continue;
                            }
                            for dx in 0..k {
                                let xi = xq as isize + dx as isize - pad as isize;
                                if xi < 0 || xi >= sh.wq as isize {
                                    continue;
                                }
                                let ibase = ((ti * sh.hq + yi as usize) * sh.wq
                                    + xi as usize)
                                    * s_count
                                    * gin;
                                let wbase = (dy * k + dx) * gin * gout;
                                for sp in 0..s_count {
                                    for gi in 0..gin {
                                        let xi_idx = ibase + sp * gin + gi;
                                        for go in 0..gout {
                                            let g = grad_out[obase + sp * gout + go];
                                            if let Some(gx) = gx.as_deref_mut() {
                                                gx[xi_idx] = gx[xi_idx]
                                                    + g * w[wbase + gi * gout + go];
                                            }
                                            if let Some(gw) = gw.as_deref_mut() {
                                                gw[wbase + gi * gout + go] = gw
                                                    [wbase + gi * gout + go]
                                                    + g * x[xi_idx];
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
        CorrAxes::Support => {
            for q in 0..nq {
                let ibase_q = q * s_count * gin;
                let obase_q = q * s_count * gout;
                for ys in 0..hs {
                    for xs in 0..ws {
                        let obase = obase_q + (ys * ws + xs) * gout;
                        for dy in 0..k {
                            let yi = ys as isize + dy as isize - pad as isize;
                            if yi < 0 || yi >= hs as isize {
                                continue;
                            }
                            for dx in 0..k {
                                let xi = xs as isize + dx as isize - pad as isize;
                                if xi < 0 || xi >= ws as isize {
                                    continue;
                                }
                                let ibase =
                                    ibase_q + ((yi as usize) * ws + xi as usize) * gin;
                                let wbase = (dy * k + dx) * gin * gout;
                                for gi in 0..gin {
                                    for go in 0..gout {
                                        let g = grad_out[obase + go];
                                        if let Some(gx) = gx.as_deref_mut() {
                                            gx[ibase + gi] = gx[ibase + gi]
                                                + g * w[wbase + gi * gout + go];
                                        }
                                        if let Some(gw) = gw.as_deref_mut() {
                                            gw[wbase + gi * gout + go] = gw
                                                [wbase + gi * gout + go]
                                                + g * x[ibase + gi];
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
}

impl<T: Scalar> Graph<T> {
    fn corr_conv(
        &self,
        op: &'static str,
        x: &Var<T>,
        weight: &Var<T>,
        bias: &Var<T>,
        axes: CorrAxes,
    ) -> Result<Var<T>> {
        self.check(x, op)?;
        self.check(weight, op)?;
        self.check(bias, op)?;
        let sh = corr_shape(x, op)?;
        let wd = weight.dims();
        if wd.len() != 4 || wd[0] != wd[1] || wd[0] % 2 == 0 || wd[2] != sh.g {
            return Err(Error::Shape {
                op,
                detail: format!("kernel {wd:?} vs input group width {}", sh.g),
            });
        }
        let (k, gout) = (wd[0], wd[3]);
        if bias.value.len() != gout {
            return Err(Error::Shape {
                op,
                detail: format!("bias {:?} vs gout {gout}", bias.dims()),
            });
        }
        let data = corr_conv_forward(x.data(), &sh, weight.data(), bias.data(), k, gout, axes);
        let out = Tensor::new(&[sh.t, sh.hq, sh.wq, sh.hs, sh.ws, gout], data)?;
        let record = self.any_tracked(&[x, weight, bias]);
        let (xn, wn, bn) = (x.node, weight.node, bias.node);
        let (xd, wdat) = (x.shared(), weight.shared());
        let x_len = x.value.len();
        let w_len = weight.value.len();
        Ok(self.push(out, record, Box::new(move |g, store| {
            store.accumulate(xn, x_len, |gx| {
                corr_conv_backward(
                    g, &xd, &sh, &wdat, k, gout, axes, Some(gx), None, None,
                );
            });
            store.accumulate(wn, w_len, |gw| {
                corr_conv_backward(
                    g, &xd, &sh, &wdat, k, gout, axes, None, Some(gw), None,
                );
            });
            store.accumulate(bn, gout, |gb| {
                corr_conv_backward(
                    g, &xd, &sh, &wdat, k, gout, axes, None, None, Some(gb),
                );
            });
        })))
    }

    /// Convolution over the query spatial dims of a correlation tensor,
    /// independent per support position.
    pub fn corr_conv_query(
        &self,
        x: &Var<T>,
        weight: &Var<T>,
        bias: &Var<T>,
    ) -> Result<Var<T>> {
        self.corr_conv("corr_conv_query", x, weight, bias, CorrAxes::Query)
    }

    /// Convolution over the support spatial dims, independent per query
    /// position.
    pub fn corr_conv_support(
        &self,
        x: &Var<T>,
        weight: &Var<T>,
        bias: &Var<T>,
    ) -> Result<Var<T>> {
        self.corr_conv("corr_conv_support", x, weight, bias, CorrAxes::Support)
    }

    /// Mean over support positions: `[t,hq,wq,hs,ws,g] -> [t·hq·wq × g]`.
    pub fn pool_support_mean(&self, x: &Var<T>) -> Result<Var<T>> {
        self.check(x, "pool_support_mean")?;
        let sh = corr_shape(x, "pool_support_mean")?;
        let s_count = sh.hs * sh.ws;
        let nq = sh.t * sh.hq * sh.wq;
        let inv = T::one() / su::<T>(s_count);
        let xd = x.data();
        let mut data = vec![T::zero(); nq * sh.g];
        for q in 0..nq {
            let base = q * s_count * sh.g;
            let dst = &mut data[q * sh.g..(q + 1) * sh.g];
            for sp in 0..s_count {
                let src = &xd[base + sp * sh.g..base + (sp + 1) * sh.g];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d = *d + *v;
                }
            }
            for d in dst.iter_mut() {
                *d = *d * inv;
            }
        }
        let out = Tensor::new(&[nq, sh.g], data)?;
        let record = self.any_tracked(&[x]);
        let xn = x.node;
        let x_len = x.value.len();
        let g_width = sh.g;
        Ok(self.push(out, record, Box::new(move |g, store| {
            store.accumulate(xn, x_len, |gx| {
                for q in 0..nq {
                    let src = &g[q * g_width..(q + 1) * g_width];
                    let base = q * s_count * g_width;
                    for sp in 0..s_count {
                        let dst = &mut gx[base + sp * g_width..base + (sp + 1) * g_width];
                        for (d, v) in dst.iter_mut().zip(src) {
                            *d = *d + *v * inv;
                        }
                    }
                }
            });
        })))
    }
}

/// Per-level squeeze weights: four k×k correlation convs (query, support,
/// twice) and the final 1×1 projection to the decoder width.
#[derive(Clone, Debug)]
pub struct SqueezeWeights<T> {
    pub conv_q1: Tensor<T>,
    pub b_q1: Tensor<T>,
    pub conv_s1: Tensor<T>,
    pub b_s1: Tensor<T>,
    pub conv_q2: Tensor<T>,
    pub b_q2: Tensor<T>,
    pub conv_s2: Tensor<T>,
    pub b_s2: Tensor<T>,
    pub proj_w: Tensor<T>,
    pub proj_b: Tensor<T>,
}

impl<T: Scalar> SqueezeWeights<T> {
    /// Near-identity init: each conv starts as a center delta plus noise,
    /// so the raw correlation signal passes through at step zero.
    pub fn init(k: usize, groups: usize, d: usize, rng: &mut impl Rng) -> Result<Self> {
        if k % 2 == 0 {
            return Err(Error::Config(format!("squeeze kernel size {k} must be odd")));
        }
        if groups == 0 {
            return Err(Error::Config("squeeze needs at least one group".into()));
        }
        let center = (k / 2) * k + k / 2;
        let delta = |gin: usize, gout: usize, rng: &mut dyn rand::RngCore| {
            Tensor::<T>::from_fn(&[k, k, gin, gout], |i| {
                let tap = i / (gin * gout);
                let gi = (i / gout) % gin;
                let go = i % gout;
                let noise: f64 = {
                    use rand_distr::Distribution;
                    rand_distr::StandardNormal.sample(rng)
                };
                let base = if tap == center && (gi == go || gin == 1) {
                    1.0
                } else {
                    0.0
                };
                crate::scalar::s::<T>(base + 0.05 * noise)
            })
        };
        let bias = |rng: &mut dyn rand::RngCore| {
            Tensor::<T>::from_fn(&[groups], |_| {
                use rand_distr::Distribution;
                let z: f64 = rand_distr::StandardNormal.sample(rng);
                crate::scalar::s::<T>(0.02 + 0.01 * z)
            })
        };
        Ok(SqueezeWeights {
            conv_q1: delta(1, groups, rng),
            b_q1: bias(rng),
            conv_s1: delta(groups, groups, rng),
            b_s1: bias(rng),
            conv_q2: delta(groups, groups, rng),
            b_q2: bias(rng),
            conv_s2: delta(groups, groups, rng),
            b_s2: bias(rng),
            proj_w: Tensor::randn(&[groups, d], (1.0 / groups as f64).sqrt(), rng),
            proj_b: Tensor::zeros(&[d]),
        })
    }

    pub fn bind(&self, g: &Graph<T>, trainable: bool) -> SqueezeVars<T> {
        let b = |t: &Tensor<T>| {
            if trainable {
                g.var(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        SqueezeVars {
            conv_q1: b(&self.conv_q1),
            b_q1: b(&self.b_q1),
            conv_s1: b(&self.conv_s1),
            b_s1: b(&self.b_s1),
            conv_q2: b(&self.conv_q2),
            b_q2: b(&self.b_q2),
            conv_s2: b(&self.conv_s2),
            b_s2: b(&self.b_s2),
            proj_w: b(&self.proj_w),
            proj_b: b(&self.proj_b),
        }
    }
}

pub struct SqueezeVars<T: Scalar> {
    pub conv_q1: Var<T>,
    pub b_q1: Var<T>,
    pub conv_s1: Var<T>,
    pub b_s1: Var<T>,
    pub conv_q2: Var<T>,
    pub b_q2: Var<T>,
    pub conv_s2: Var<T>,
    pub b_s2: Var<T>,
    pub proj_w: Var<T>,
    pub proj_b: Var<T>,
}

/// Squeezes one correlation level into `[tokens × D]` features.
pub fn squeeze_level<T: Scalar>(
    g: &Graph<T>,
    corr: &Var<T>,
    w: &SqueezeVars<T>,
) -> Result<Var<T>> {
    let x = g.corr_conv_query(corr, &w.conv_q1, &w.b_q1)?;
    let x = g.corr_conv_support(&x, &w.conv_s1, &w.b_s1)?;
    let x = g.relu(&x)?;
    let x = g.corr_conv_query(&x, &w.conv_q2, &w.b_q2)?;
    let x = g.corr_conv_support(&x, &w.conv_s2, &w.b_s2)?;
    let x = g.relu(&x)?;
    let pooled = g.pool_support_mean(&x)?;
    g.add_row_broadcast(&g.matmul(&pooled, &w.proj_w)?, &w.proj_b)
}

/// Squeezes the whole correlation pyramid into decoder-ready token maps.
pub fn squeeze_pyramid<T: Scalar>(
    g: &Graph<T>,
    corr: &CorrelationPyramid<T>,
    weights: &[SqueezeVars<T>],
) -> Result<FeaturePyramid<T>> {
    if corr.len() != weights.len() {
        return Err(Error::Config(format!(
            "squeeze has {} weight sets for {} correlation levels",
            weights.len(),
            corr.len()
        )));
    }
    let mut levels: Vec<(LevelDims, Var<T>)> = Vec::with_capacity(corr.len());
    for (lvl, w) in corr.iter().zip(weights) {
        let shaped = g.constant(lvl.data.reshape(&[
            lvl.query.t,
            lvl.query.h,
            lvl.query.w,
            lvl.hs,
            lvl.ws,
            1,
        ])?);
        let tokens = squeeze_level(g, &shaped, w)?;
        levels.push((lvl.query, tokens));
    }
    Ok(FeaturePyramid { levels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::msdecode::LevelDims;
    use crate::pipeline::correlate::CorrLevel;
    use crate::tensor::grad_check;

    fn randt(dims: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = crate::rng::stream(seed, "sq-test", 0);
        Tensor::randn(dims, 1.0, &mut rng)
    }

    #[test]
    fn corr_conv_query_matches_direct_loops() {
        let x = randt(&[1, 3, 3, 2, 2, 1], 1);
        let w = randt(&[3, 3, 1, 2], 2);
        let b = randt(&[2], 3);
        let g = Graph::eval();
        let out = g
            .corr_conv_query(&g.constant(x.clone()), &g.constant(w.clone()), &g.constant(b.clone()))
            .unwrap();
        assert_eq!(out.dims(), &[1, 3, 3, 2, 2, 2]);
        for yq in 0..3usize {
            for xq in 0..3usize {
                for ys in 0..2usize {
                    for xs in 0..2usize {
                        for go in 0..2usize {
                            let mut acc = b.data()[go];
                            for dy in 0..3usize {
                                for dx in 0..3usize {
                                    let yi = yq as isize + dy as isize - 1;
                                    let xi = xq as isize + dx as isize - 1;
                                    if yi < 0 || yi >= 3 || xi < 0 || xi >= 3 {
                                        continue;
                                    }
                                    let xi_idx = (((yi as usize * 3 + xi as usize) * 2 + ys)
                                        * 2
                                        + xs)
                                        * 1;
                                    acc += x.data()[xi_idx]
                                        * w.data()[((dy * 3 + dx) * 1) * 2 + go];
                                }
                            }
                            let got =
                                out.data()[(((yq * 3 + xq) * 2 + ys) * 2 + xs) * 2 + go];
                            assert!((got - acc).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn corr_conv_support_matches_direct_loops() {
        let x = randt(&[2, 2, 2, 3, 3, 2], 4);
        let w = randt(&[3, 3, 2, 1], 5);
        let b = randt(&[1], 6);
        let g = Graph::eval();
        let out = g
            .corr_conv_support(&g.constant(x.clone()), &g.constant(w.clone()), &g.constant(b.clone()))
            .unwrap();
        assert_eq!(out.dims(), &[2, 2, 2, 3, 3, 1]);
        let nq = 8;
        for q in 0..nq {
            for ys in 0..3usize {
                for xs in 0..3usize {
                    let mut acc = b.data()[0];
                    for dy in 0..3usize {
                        for dx in 0..3usize {
                            let yi = ys as isize + dy as isize - 1;
                            let xi = xs as isize + dx as isize - 1;
                            if yi < 0 || yi >= 3 || xi < 0 || xi >= 3 {
                                continue;
                            }
                            for gi in 0..2usize {
                                acc += x.data()
                                    [(q * 9 + yi as usize * 3 + xi as usize) * 2 + gi]
                                    * w.data()[((dy * 3 + dx) * 2 + gi) * 1];
                            }
                        }
                    }
                    let got = out.data()[q * 9 + ys * 3 + xs];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn corr_ops_pass_grad_check() {
        let x = randt(&[1, 2, 2, 2, 2, 2], 7);
        let wq = randt(&[3, 3, 2, 2], 8);
        let bq = randt(&[2], 9);
        let ws = randt(&[3, 3, 2, 1], 10);
        let bs = randt(&[1], 11);
        let err = grad_check(
            |g, vs| {
                let a = g.corr_conv_query(&vs[0], &vs[1], &vs[2])?;
                let b = g.corr_conv_support(&a, &vs[3], &vs[4])?;
                let r = g.relu(&b)?;
                let p = g.pool_support_mean(&r)?;
                let wsum = g.constant(Tensor::from_fn(p.dims(), |i| 0.3 + 0.05 * (i % 4) as f64));
                let prod = g.mul(&p, &wsum)?;
                g.sum_all(&prod)
            },
            &[x, wq, bq, ws, bs],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    fn delta_weights(k: usize, d: usize) -> SqueezeWeights<f64> {
        let center = (k / 2) * k + k / 2;
        let delta = |gin: usize, gout: usize| {
            Tensor::<f64>::from_fn(&[k, k, gin, gout], |i| {
                let tap = i / (gin * gout);
                let gi = (i / gout) % gin;
                let go = i % gout;
                if tap == center && (gi == go || gin == 1) {
                    1.0
                } else {
                    0.0
                }
            })
        };
        SqueezeWeights {
            conv_q1: delta(1, 1),
            b_q1: Tensor::zeros(&[1]),
            conv_s1: delta(1, 1),
            b_s1: Tensor::zeros(&[1]),
            conv_q2: delta(1, 1),
            b_q2: Tensor::zeros(&[1]),
            conv_s2: delta(1, 1),
            b_s2: Tensor::zeros(&[1]),
            proj_w: Tensor::filled(&[1, d], 1.0),
            proj_b: Tensor::zeros(&[d]),
        }
    }

    #[test]
    fn identity_convs_reduce_to_support_mean_pooling() {
        // with pure delta kernels and a unit projection, the squeeze output
        // equals the mean correlation over support positions (nonnegative
        // input keeps the interleaved ReLUs transparent)
        let dims = LevelDims { t: 2, h: 3, w: 2 };
        let mut rng = crate::rng::stream(12, "sq-test", 0);
        use rand::Rng;
        let corr_data = Tensor::<f64>::from_fn(&[2, 3, 2, 2, 2], |_| rng.gen_range(0.0..1.0));
        let lvl = CorrLevel {
            query: dims,
            hs: 2,
            ws: 2,
            data: corr_data.clone(),
        };
        let w = delta_weights(3, 1);
        let g = Graph::eval();
        let out = squeeze_pyramid(&g, &vec![lvl], &[w.bind(&g, false)]).unwrap();
        let (ld, tokens) = &out.levels[0];
        assert_eq!(ld.tokens(), 12);
        assert_eq!(tokens.dims(), &[12, 1]);
        for q in 0..12 {
            let mean: f64 =
                corr_data.data()[q * 4..(q + 1) * 4].iter().sum::<f64>() / 4.0;
            assert!((tokens.data()[q] - mean).abs() < 1e-12, "token {q}");
        }
    }

    #[test]
    fn zero_correlations_follow_the_bias_pathway() {
        let dims = LevelDims { t: 1, h: 2, w: 2 };
        let mk = |seed: u64| CorrLevel {
            query: dims,
            hs: 2,
            ws: 2,
            data: Tensor::<f64>::zeros(&[1, 2, 2, 2, 2]),
        };
        let mut rng = crate::rng::stream(13, "sq-w", 0);
        let mut w = SqueezeWeights::<f64>::init(3, 2, 4, &mut rng).unwrap();
        w.b_q1 = randt(&[2], 14);
        w.b_s1 = randt(&[2], 15);
        let g = Graph::eval();
        let a = squeeze_pyramid(&g, &vec![mk(0)], &[w.bind(&g, false)]).unwrap();
        let b = squeeze_pyramid(&g, &vec![mk(1)], &[w.bind(&g, false)]).unwrap();
        // input-independent: two zero inputs agree, and the biases show up
        assert!(a.levels[0].1.value.bits_eq(&b.levels[0].1.value));
        assert!(a.levels[0].1.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn squeeze_outputs_token_by_width_shape() {
        let dims = LevelDims { t: 2, h: 4, w: 4 };
        let lvl = CorrLevel {
            query: dims,
            hs: 4,
            ws: 4,
            data: randt(&[2, 4, 4, 4, 4], 16),
        };
        let mut rng = crate::rng::stream(17, "sq-w", 0);
        let w = SqueezeWeights::<f64>::init(3, 2, 8, &mut rng).unwrap();
        let g = Graph::eval();
        let out = squeeze_pyramid(&g, &vec![lvl], &[w.bind(&g, false)]).unwrap();
        assert_eq!(out.levels[0].1.dims(), &[32, 8]);
    }
}

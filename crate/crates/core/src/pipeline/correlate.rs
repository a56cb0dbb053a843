//! Support masking and the hypercorrelation pyramid: dense pairwise cosine
//! correlations between masked support features and query features. Both
//! consume frozen backbone outputs, so neither participates in
//! differentiation.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::msdecode::LevelDims;
use crate::scalar::{s, Scalar};
use crate::tensor::{bilinear_resize_kernel, Tensor};

/// Resizes a binary image mask to each pyramid level (align-corners,
/// re-binarized at 0.5 so masking stays idempotent) and zeroes background
/// features.
pub fn mask_support<T: Scalar>(pyramid: &[Tensor<T>], mask: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let md = mask.dims();
    if md.len() != 2 {
        return Err(Error::Shape {
            op: "mask_support",
            detail: format!("mask must be [h,w], got {md:?}"),
        });
    }
    if mask
        .data()
        .iter()
        .any(|&v| v != T::zero() && v != T::one())
    {
        return Err(Error::Validation(
            "mask_support: mask values must be 0 or 1".into(),
        ));
    }
    let (h, w) = (md[0], md[1]);
    let mut out = Vec::with_capacity(pyramid.len());
    for feat in pyramid {
        let fd = feat.dims();
        if fd.len() != 4 {
            return Err(Error::Shape {
                op: "mask_support",
                detail: format!("feature level must be [t,h,w,c], got {fd:?}"),
            });
        }
        let level = resize_mask_binary(mask, h, w, fd[1], fd[2]);
        let c = fd[3];
        let mut data = feat.data().to_vec();
        for (p, keep) in level.iter().enumerate() {
            if !*keep {
                for v in &mut data[p * c..(p + 1) * c] {
                    *v = T::zero();
                }
            }
        }
        let mut masked = Vec::with_capacity(feat.len());
        // apply per frame: the image mask broadcasts over the clip axis
        let frame = fd[1] * fd[2] * c;
        for t in 0..fd[0] {
            masked.extend_from_slice(&data[t * frame..(t + 1) * frame]);
        }
        out.push(Tensor::new(fd, masked)?);
    }
    Ok(out)
}

/// Align-corners resize of a binary mask followed by re-binarization.
pub fn resize_mask_binary<T: Scalar>(
    mask: &Tensor<T>,
    h: usize,
    w: usize,
    h2: usize,
    w2: usize,
) -> Vec<bool> {
    let soft = bilinear_resize_kernel(mask.data(), 1, h, w, 1, h2, w2);
    soft.iter().map(|&v| v >= s::<T>(0.5)).collect()
}

/// Soft align-corners resize of a (possibly soft) mask, used where the
/// consumer accepts soft weights.
pub fn resize_mask_soft<T: Scalar>(
    mask: &[T],
    h: usize,
    w: usize,
    h2: usize,
    w2: usize,
) -> Vec<T> {
    bilinear_resize_kernel(mask, 1, h, w, 1, h2, w2)
}

/// One level of the correlation pyramid: `[t, hq, wq, hs, ws]` cosine
/// similarities in `[-1, 1]`, with the zero-vector convention (either side
/// zero ⇒ correlation 0).
#[derive(Clone, Debug)]
pub struct CorrLevel<T> {
    pub query: LevelDims,
    pub hs: usize,
    pub ws: usize,
    pub data: Tensor<T>,
}

impl<T: Scalar> CorrLevel<T> {
    pub fn support_positions(&self) -> usize {
        self.hs * self.ws
    }
}

pub type CorrelationPyramid<T> = Vec<CorrLevel<T>>;

/// Dense pairwise cosine correlation per level between a masked support
/// pyramid (single-frame) and a query pyramid.
pub fn hypercorrelation<T: Scalar>(
    masked_support: &[Tensor<T>],
    query: &[Tensor<T>],
) -> Result<CorrelationPyramid<T>> {
    if masked_support.len() != query.len() {
        return Err(Error::Shape {
            op: "hypercorrelation",
            detail: format!(
                "support pyramid has {} levels, query has {}",
                masked_support.len(),
                query.len()
            ),
        });
    }
    let tiny = s::<T>(1e-12);
    let mut out = Vec::with_capacity(query.len());
    for (sup, qry) in masked_support.iter().zip(query) {
        let sd = sup.dims();
        let qd = qry.dims();
        if sd[0] != 1 {
            return Err(Error::Shape {
                op: "hypercorrelation",
                detail: format!("support level must be single-frame, got {sd:?}"),
            });
        }
        if sd[3] != qd[3] || sd[1] != qd[1] || sd[2] != qd[2] {
            return Err(Error::Shape {
                op: "hypercorrelation",
                detail: format!("support {sd:?} vs query {qd:?}"),
            });
        }
        let (t, hq, wq, c) = (qd[0], qd[1], qd[2], qd[3]);
        let (hs, ws) = (sd[1], sd[2]);
        let n_q = t * hq * wq;
        let n_s = hs * ws;
        let qdat = qry.data();
        let sdat = sup.data();
        let mut qnorm = vec![T::zero(); n_q];
        for (p, nv) in qnorm.iter_mut().enumerate() {
            let row = &qdat[p * c..(p + 1) * c];
            let mut acc = T::zero();
            for v in row {
                acc = acc + *v * *v;
            }
            *nv = acc.sqrt();
        }
        let mut snorm = vec![T::zero(); n_s];
        for (p, nv) in snorm.iter_mut().enumerate() {
            let row = &sdat[p * c..(p + 1) * c];
            let mut acc = T::zero();
            for v in row {
                acc = acc + *v * *v;
            }
            *nv = acc.sqrt();
        }
        let mut data = vec![T::zero(); n_q * n_s];
        for q in 0..n_q {
            if qnorm[q] <= tiny {
                continue;
            }
            let qrow = &qdat[q * c..(q + 1) * c];
            let dst = &mut data[q * n_s..(q + 1) * n_s];
            for (sp, d) in dst.iter_mut().enumerate() {
                if snorm[sp] <= tiny {
                    continue;
                }
                let srow = &sdat[sp * c..(sp + 1) * c];
                let mut dot = T::zero();
                for (a, b) in qrow.iter().zip(srow) {
                    dot = dot + *a * *b;
                }
                *d = (dot / (qnorm[q] * snorm[sp])).max(-T::one()).min(T::one());
            }
        }
        out.push(CorrLevel {
            query: LevelDims { t, h: hq, w: wq },
            hs,
            ws,
            data: Tensor::new(&[t, hq, wq, hs, ws], data)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::backbone::Backbone;
    use crate::tensor::cosine_similarity;

    #[test]
    fn all_ones_mask_is_identity_all_zeros_clears() {
        let bb = Backbone::<f64>::init(&[8, 4], 3).unwrap();
        let mut rng = crate::rng::stream(4, "corr-test", 0);
        let img = Tensor::randn(&[1, 16, 16, 3], 1.0, &mut rng);
        let pyr = bb.extract_pyramid(&img).unwrap();

        let ones = Tensor::<f64>::filled(&[16, 16], 1.0);
        let kept = mask_support(&pyr, &ones).unwrap();
        for (a, b) in kept.iter().zip(&pyr) {
            assert!(a.bits_eq(b));
        }

        let zeros = Tensor::<f64>::zeros(&[16, 16]);
        let cleared = mask_support(&pyr, &zeros).unwrap();
        for lvl in &cleared {
            assert!(lvl.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn half_plane_mask_zeroes_the_matching_token_half() {
        let bb = Backbone::<f64>::init(&[16, 8, 4], 3).unwrap();
        let mut rng = crate::rng::stream(5, "corr-test", 0);
        let img = Tensor::randn(&[1, 64, 64, 3], 1.0, &mut rng);
        let pyr = bb.extract_pyramid(&img).unwrap();
        // left half foreground
        let mask = Tensor::<f64>::from_fn(&[64, 64], |i| if i % 64 < 32 { 1.0 } else { 0.0 });
        let masked = mask_support(&pyr, &mask).unwrap();
        for (m, orig) in masked.iter().zip(&pyr) {
            let d = m.dims();
            let (h, w, c) = (d[1], d[2], d[3]);
            // per-level oracle: resize + threshold, then check each token
            let keep = resize_mask_binary(&mask, 64, 64, h, w);
            for y in 0..h {
                for x in 0..w {
                    let p = (y * w + x) * c;
                    for ci in 0..c {
                        let expect = if keep[y * w + x] {
                            orig.data()[p + ci]
                        } else {
                            0.0
                        };
                        assert_eq!(m.data()[p + ci], expect);
                    }
                    // the half-plane boundary lands exactly on the token grid
                    assert_eq!(keep[y * w + x], x < w / 2, "level {h}x{w} col {x}");
                }
            }
        }
    }

    #[test]
    fn masking_is_idempotent() {
        let bb = Backbone::<f64>::init(&[8, 4], 3).unwrap();
        let mut rng = crate::rng::stream(6, "corr-test", 0);
        let img = Tensor::randn(&[1, 16, 16, 3], 1.0, &mut rng);
        let pyr = bb.extract_pyramid(&img).unwrap();
        let mask = Tensor::<f64>::from_fn(&[16, 16], |i| {
            if (i / 16 + i % 16) % 3 == 0 {
                1.0
            } else {
                0.0
            }
        });
        let once = mask_support(&pyr, &mask).unwrap();
        let twice = mask_support(&once, &mask).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert!(a.bits_eq(b));
        }
    }

    #[test]
    fn self_episode_diagonal_is_one() {
        let bb = Backbone::<f64>::init(&[8, 4], 3).unwrap();
        let mut rng = crate::rng::stream(7, "corr-test", 0);
        let img = Tensor::randn(&[1, 16, 16, 3], 1.0, &mut rng);
        let pyr = bb.extract_pyramid(&img).unwrap();
        let ones = Tensor::<f64>::filled(&[16, 16], 1.0);
        let masked = mask_support(&pyr, &ones).unwrap();
        let corr = hypercorrelation(&masked, &pyr).unwrap();
        for lvl in &corr {
            let n = lvl.query.tokens();
            assert_eq!(n, lvl.support_positions());
            for i in 0..n {
                let v = lvl.data.data()[i * n + i];
                assert!((v - 1.0).abs() < 1e-6, "diagonal {v}");
            }
            assert!(lvl
                .data
                .data()
                .iter()
                .all(|&v| (-1.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn orthogonal_features_correlate_to_zero() {
        // two-channel features: query along e0, support along e1
        let q = Tensor::<f64>::from_fn(&[1, 2, 2, 2], |i| if i % 2 == 0 { 1.0 } else { 0.0 });
        let s = Tensor::<f64>::from_fn(&[1, 2, 2, 2], |i| if i % 2 == 1 { 1.0 } else { 0.0 });
        let corr = hypercorrelation(&[s], &[q]).unwrap();
        assert!(corr[0].data.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn random_pyramid_matches_pairwise_cosine_oracle() {
        let mut rng = crate::rng::stream(8, "corr-test", 0);
        let sup = Tensor::<f64>::randn(&[1, 3, 2, 5], 1.0, &mut rng);
        let qry = Tensor::<f64>::randn(&[2, 3, 2, 5], 1.0, &mut rng);
        let corr = hypercorrelation(&[sup.clone()], &[qry.clone()]).unwrap();
        let lvl = &corr[0];
        let n_s = 6;
        for q in 0..12 {
            let qrow = &qry.data()[q * 5..(q + 1) * 5];
            for sp in 0..n_s {
                let srow = &sup.data()[sp * 5..(sp + 1) * 5];
                let expect = cosine_similarity(qrow, srow).unwrap();
                let got = lvl.data.data()[q * n_s + sp];
                assert!((got - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zeroed_support_positions_yield_zero_rows() {
        let mut rng = crate::rng::stream(9, "corr-test", 0);
        let mut sdata = Tensor::<f64>::randn(&[1, 2, 2, 3], 1.0, &mut rng)
            .data()
            .to_vec();
        for v in &mut sdata[0..3] {
            *v = 0.0; // first support position masked out
        }
        let sup = Tensor::new(&[1, 2, 2, 3], sdata).unwrap();
        let qry = Tensor::<f64>::randn(&[1, 2, 2, 3], 1.0, &mut rng);
        let corr = hypercorrelation(&[sup], &[qry]).unwrap();
        for q in 0..4 {
            assert_eq!(corr[0].data.data()[q * 4], 0.0);
        }
    }
}

//! Adaptive K-shot combination: per-shot predictions are reweighed by the
//! cosine similarity between masked-pooled coarsest support features and
//! query features pooled under the shot's own soft prediction.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::{su, Scalar};
use crate::tensor::{cosine_similarity, sigmoid_kernel, Tensor};

use super::refine::Prediction;

/// Cosine weights from (support, query) pooled-feature pairs. Negative
/// cosines clamp to zero; if every weight vanishes the combination falls
/// back to uniform averaging and reports it.
pub fn kshot_weights<T: Scalar>(pairs: &[(Vec<T>, Vec<T>)]) -> Result<(Vec<T>, bool)> {
    if pairs.is_empty() {
        return Err(Error::Config("adaptive K-shot needs at least one shot".into()));
    }
    let mut weights = Vec::with_capacity(pairs.len());
    for (sup, qry) in pairs {
        let w = match cosine_similarity(sup, qry) {
            Ok(c) => c.max(T::zero()),
            // a degenerate pooled vector contributes nothing
            Err(Error::DegenerateVector) => T::zero(),
            Err(e) => return Err(e),
        };
        weights.push(w);
    }
    let total: T = weights.iter().fold(T::zero(), |a, &b| a + b);
    if total == T::zero() {
        let uni = T::one() / su::<T>(pairs.len());
        return Ok((alloc::vec![uni; pairs.len()], true));
    }
    Ok((weights, false))
}

/// Weighted combination of per-shot predictions in probability space.
#[derive(Clone, Debug)]
pub struct CombinedPrediction<T> {
    pub mask_probs: Tensor<T>,
    pub boundary_probs: Option<Tensor<T>>,
    pub weights: Vec<T>,
    pub uniform_fallback: bool,
}

/// `Σ_k w_k σ(M̂_k) / Σ_k w_k`, applied to mask (and boundary, when every
/// shot carries one).
pub fn adaptive_combine<T: Scalar>(
    preds: &[Prediction<T>],
    weights: &[T],
    uniform_fallback: bool,
) -> Result<CombinedPrediction<T>> {
    if preds.is_empty() || preds.len() != weights.len() {
        return Err(Error::Config(alloc::format!(
            "{} predictions vs {} weights",
            preds.len(),
            weights.len()
        )));
    }
    let dims = preds[0].mask_logits.dims().to_vec();
    for p in preds {
        if p.mask_logits.dims() != dims {
            return Err(Error::Shape {
                op: "adaptive_combine",
                detail: alloc::format!(
                    "shot predictions disagree: {:?} vs {dims:?}",
                    p.mask_logits.dims()
                ),
            });
        }
    }
    let total: T = weights.iter().fold(T::zero(), |a, &b| a + b);
    if total <= T::zero() {
        return Err(Error::Config("combination weights sum to zero".into()));
    }
    let n = preds[0].mask_logits.len();
    let mut mask = alloc::vec![T::zero(); n];
    for (p, &w) in preds.iter().zip(weights) {
        let scale = w / total;
        if scale == T::zero() {
            continue;
        }
        for (acc, &z) in mask.iter_mut().zip(p.mask_logits.data()) {
            *acc = *acc + scale * sigmoid_kernel(z);
        }
    }
    let boundary = if preds.iter().all(|p| p.boundary_logits.is_some()) {
        let mut b = alloc::vec![T::zero(); n];
        for (p, &w) in preds.iter().zip(weights) {
            let scale = w / total;
            if scale == T::zero() {
                continue;
            }
            for (acc, &z) in b.iter_mut().zip(p.boundary_logits.as_ref().unwrap().data()) {
                *acc = *acc + scale * sigmoid_kernel(z);
            }
        }
        Some(Tensor::new(&dims, b)?)
    } else {
        None
    };
    Ok(CombinedPrediction {
        mask_probs: Tensor::new(&dims, mask)?,
        boundary_probs: boundary,
        weights: weights.to_vec(),
        uniform_fallback,
    })
}

/// Probability map of a single prediction, for the K = 1 path and for
/// comparisons.
pub fn prediction_probs<T: Scalar>(pred: &Prediction<T>) -> Tensor<T> {
    Tensor::from_fn(pred.mask_logits.dims(), |i| {
        sigmoid_kernel(pred.mask_logits.data()[i])
    })
}

/// Normalized weights (for reports): `w_k / Σ w`.
pub fn normalized<T: Scalar>(weights: &[T]) -> Vec<T> {
    let total: T = weights.iter().fold(T::zero(), |a, &b| a + b);
    if total == T::zero() {
        return weights.to_vec();
    }
    weights.iter().map(|&w| w / total).collect()
}

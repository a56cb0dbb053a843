//! Training losses: binary cross entropy + boundary term for few-shot
//! meta-training, equally weighted focal + dice for the fully supervised
//! mode.

use crate::error::{Error, Result};
use crate::scalar::{s, Scalar};
use crate::tensor::{morph, Graph, Tensor, Var};

use super::refine::PredVars;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    Fewshot,
    Avos,
}

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;

fn check_binary<T: Scalar>(gt: &Tensor<T>) -> Result<()> {
    if gt.data().iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(Error::Validation(
            "ground-truth mask must be binary".into(),
        ));
    }
    Ok(())
}

/// Scalar training loss for one prediction against a binary mask.
///
/// Few-shot: mean BCE on the mask plus mean BCE on the boundary (against
/// the morphological ground-truth ring) when a boundary head is present.
/// Fully supervised: focal + dice, weighted equally.
pub fn compute_loss<T: Scalar>(
    g: &Graph<T>,
    pred: &PredVars<T>,
    gt: &Tensor<T>,
    mode: LossMode,
) -> Result<Var<T>> {
    check_binary(gt)?;
    if pred.mask.dims() != gt.dims() {
        return Err(Error::Shape {
            op: "compute_loss",
            detail: alloc::format!("prediction {:?} vs mask {:?}", pred.mask.dims(), gt.dims()),
        });
    }
    match mode {
        LossMode::Fewshot => {
            let mut loss = g.bce_logits_mean(&pred.mask, gt)?;
            if let Some(bdry) = &pred.boundary {
                let gt_bdry = morph::morph_boundary(gt, 1)?;
                let lb = g.bce_logits_mean(bdry, &gt_bdry)?;
                loss = g.add(&loss, &lb)?;
            }
            Ok(loss)
        }
        LossMode::Avos => {
            let focal =
                g.focal_loss_mean(&pred.mask, gt, s::<T>(FOCAL_ALPHA), s::<T>(FOCAL_GAMMA))?;
            let dice = g.dice_loss(&pred.mask, gt)?;
            g.add(&focal, &dice)
        }
    }
}

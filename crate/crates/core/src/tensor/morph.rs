//! Binary morphology on `[t,h,w]` masks with a square structuring element
//! and zero padding outside the frame.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn check_binary<T: Scalar>(mask: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    let d = mask.dims();
    if d.len() != 3 {
        return Err(Error::Shape {
            op,
            detail: format!("mask must be [t,h,w], got {d:?}"),
        });
    }
    if mask
        .data()
        .iter()
        .any(|&v| v != T::zero() && v != T::one())
    {
        return Err(Error::Validation(format!("{op}: mask values must be 0 or 1")));
    }
    Ok((d[0], d[1], d[2]))
}

fn sweep<T: Scalar>(mask: &Tensor<T>, radius: usize, dilate: bool) -> Tensor<T> {
    let d = mask.dims();
    let (t, h, w) = (d[0], d[1], d[2]);
    let md = mask.data();
    let r = radius as isize;
    let mut out = vec![T::zero(); t * h * w];
    for ti in 0..t {
        let base = ti * h * w;
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut hit = !dilate;
                'scan: for dy in -r..=r {
                    for dx in -r..=r {
                        let (ny, nx) = (y + dy, x + dx);
                        // zero padding: out-of-frame counts as background
                        let v = if ny < 0 || ny >= h as isize || nx < 0 || nx >= w as isize {
                            T::zero()
                        } else {
                            md[base + (ny as usize) * w + nx as usize]
                        };
                        if dilate && v == T::one() {
                            hit = true;
                            break 'scan;
                        }
                        if !dilate && v == T::zero() {
                            hit = false;
                            break 'scan;
                        }
                    }
                }
                if hit {
                    out[base + (y as usize) * w + x as usize] = T::one();
                }
            }
        }
    }
    Tensor::new(d, out).expect("same dims")
}

pub fn dilate<T: Scalar>(mask: &Tensor<T>, radius: usize) -> Result<Tensor<T>> {
    check_binary(mask, "dilate")?;
    Ok(sweep(mask, radius, true))
}

pub fn erode<T: Scalar>(mask: &Tensor<T>, radius: usize) -> Result<Tensor<T>> {
    check_binary(mask, "erode")?;
    Ok(sweep(mask, radius, false))
}

/// Ring around the contour: `dilate(mask, r) - erode(mask, r)`, clipped to
/// {0, 1}.
pub fn morph_boundary<T: Scalar>(mask: &Tensor<T>, radius: usize) -> Result<Tensor<T>> {
    check_binary(mask, "morph_boundary")?;
    let dil = sweep(mask, radius, true);
    let ero = sweep(mask, radius, false);
    let data: Vec<T> = dil
        .data()
        .iter()
        .zip(ero.data())
        .map(|(d, e)| (*d - *e).max(T::zero()))
        .collect();
    Tensor::new(mask.dims(), data)
}

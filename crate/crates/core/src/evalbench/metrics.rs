//! Region similarity (J), boundary accuracy (F) and box success rate (SR).
//! Metrics are computed per frame in `f64` and averaged by the caller.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{morph, Tensor};

fn check_pair<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    op: &'static str,
) -> Result<(usize, usize, usize)> {
    if a.dims() != b.dims() {
        return Err(Error::Shape {
            op,
            detail: format!("{:?} vs {:?}", a.dims(), b.dims()),
        });
    }
    let d = a.dims();
    if d.len() != 3 {
        return Err(Error::Shape {
            op,
            detail: format!("masks must be [t,h,w], got {d:?}"),
        });
    }
    for m in [a, b] {
        if m.data().iter().any(|&v| v != T::zero() && v != T::one()) {
            return Err(Error::Validation(format!("{op}: masks must be binary")));
        }
    }
    Ok((d[0], d[1], d[2]))
}

/// Region similarity: `|∩| / |∪|` over the whole clip; both-empty counts
/// as a perfect 1.
pub fn iou<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    check_pair(pred, gt, "iou")?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (p, g) in pred.data().iter().zip(gt.data()) {
        let (p1, g1) = (*p == T::one(), *g == T::one());
        if p1 && g1 {
            inter += 1;
        }
        if p1 || g1 {
            union += 1;
        }
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Boundary accuracy: contours from `morph_boundary(r = 1)`, precision and
/// recall matched within a Euclidean pixel tolerance, combined as
/// `2PR/(P+R)`. Identical masks score 1; if both contours are empty the
/// score is 0 by convention.
pub fn boundary_f<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, tol: f64) -> Result<f64> {
    let (t, h, w) = check_pair(pred, gt, "boundary_f")?;
    let pc = morph::morph_boundary(pred, 1)?;
    let gc = morph::morph_boundary(gt, 1)?;
    let mut f_sum = 0.0;
    for frame in 0..t {
        let pf = &pc.data()[frame * h * w..(frame + 1) * h * w];
        let gf = &gc.data()[frame * h * w..(frame + 1) * h * w];
        f_sum += contour_f(pf, gf, h, w, tol);
    }
    Ok(f_sum / t as f64)
}

fn contour_f<T: Scalar>(pred: &[T], gt: &[T], h: usize, w: usize, tol: f64) -> f64 {
    let pred_pts: Vec<(usize, usize)> = contour_points(pred, h, w);
    let gt_pts: Vec<(usize, usize)> = contour_points(gt, h, w);
    if pred_pts.is_empty() && gt_pts.is_empty() {
        return 0.0;
    }
    if pred_pts.is_empty() || gt_pts.is_empty() {
        return 0.0;
    }
    let precision = matched_fraction(&pred_pts, &gt_pts, h, w, tol);
    let recall = matched_fraction(&gt_pts, &pred_pts, h, w, tol);
    if precision + recall == 0.0 {
        return 0.0;
    }
    2.0 * precision * recall / (precision + recall)
}

fn contour_points<T: Scalar>(mask: &[T], h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut pts = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] == T::one() {
                pts.push((y, x));
            }
        }
    }
    pts
}

/// Fraction of `from` points within Euclidean `tol` of any `to` point,
/// via a dilated hit mask.
fn matched_fraction(
    from: &[(usize, usize)],
    to: &[(usize, usize)],
    h: usize,
    w: usize,
    tol: f64,
) -> f64 {
    let r = tol.floor() as isize;
    let mut hit = vec![false; h * w];
    for &(y, x) in to {
        for dy in -r..=r {
            for dx in -r..=r {
                if ((dy * dy + dx * dx) as f64) > tol * tol {
                    continue;
                }
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny >= 0 && ny < h as isize && nx >= 0 && nx < w as isize {
                    hit[ny as usize * w + nx as usize] = true;
                }
            }
        }
    }
    let matched = from.iter().filter(|&&(y, x)| hit[y * w + x]).count();
    matched as f64 / from.len() as f64
}

/// Axis-aligned box `[y0, x0] ..= [y1, x1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoundingBox {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl BoundingBox {
    pub fn area(&self) -> usize {
        (self.y1 - self.y0 + 1) * (self.x1 - self.x0 + 1)
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let iy0 = self.y0.max(other.y0);
        let ix0 = self.x0.max(other.x0);
        let iy1 = self.y1.min(other.y1);
        let ix1 = self.x1.min(other.x1);
        if iy1 < iy0 || ix1 < ix0 {
            return 0.0;
        }
        let inter = (iy1 - iy0 + 1) * (ix1 - ix0 + 1);
        let union = self.area() + other.area() - inter;
        inter as f64 / union as f64
    }

    pub fn from_mask<T: Scalar>(mask: &[T], h: usize, w: usize) -> Option<BoundingBox> {
        let mut bb: Option<BoundingBox> = None;
        for y in 0..h {
            for x in 0..w {
                if mask[y * w + x] == T::one() {
                    bb = Some(match bb {
                        None => BoundingBox {
                            y0: y,
                            x0: x,
                            y1: y,
                            x1: x,
                        },
                        Some(b) => BoundingBox {
                            y0: b.y0.min(y),
                            x0: b.x0.min(x),
                            y1: b.y1.max(y),
                            x1: b.x1.max(x),
                        },
                    });
                }
            }
        }
        bb
    }
}

/// Bounding box of the largest 8-connected component of a single-frame
/// mask, or `None` for an empty prediction.
pub fn largest_component_box<T: Scalar>(
    mask: &[T],
    h: usize,
    w: usize,
) -> Option<BoundingBox> {
    let mut seen = vec![false; h * w];
    let mut best: Option<(usize, BoundingBox)> = None;
    for start in 0..h * w {
        if mask[start] != T::one() || seen[start] {
            continue;
        }
        let mut stack = vec![start];
        seen[start] = true;
        let mut size = 0usize;
        let mut bb = BoundingBox {
            y0: start / w,
            x0: start % w,
            y1: start / w,
            x1: start % w,
        };
        while let Some(p) = stack.pop() {
            size += 1;
            let (y, x) = (p / w, p % w);
            bb.y0 = bb.y0.min(y);
            bb.x0 = bb.x0.min(x);
            bb.y1 = bb.y1.max(y);
            bb.x1 = bb.x1.max(x);
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if ny < 0 || ny >= h as isize || nx < 0 || nx >= w as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if mask[q] == T::one() && !seen[q] {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        if best.as_ref().map(|(s, _)| size > *s).unwrap_or(true) {
            best = Some((size, bb));
        }
    }
    best.map(|(_, bb)| bb)
}

pub const SR_THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

/// Success indicators per threshold: 1 when the largest predicted
/// component's box reaches the IoU threshold against the ground-truth box.
/// Empty predictions score 0 everywhere.
pub fn success_rate<T: Scalar>(
    pred: &Tensor<T>,
    gt_box: &BoundingBox,
    thresholds: &[f64],
) -> Result<Vec<f64>> {
    let d = pred.dims();
    if d.len() != 2 {
        return Err(Error::Shape {
            op: "success_rate",
            detail: format!("expected a single-frame [h,w] mask, got {d:?}"),
        });
    }
    if pred
        .data()
        .iter()
        .any(|&v| v != T::zero() && v != T::one())
    {
        return Err(Error::Validation("success_rate: mask must be binary".into()));
    }
    let bb = largest_component_box(pred.data(), d[0], d[1]);
    let score = match bb {
        Some(b) => b.iou(gt_box),
        None => 0.0,
    };
    Ok(thresholds
        .iter()
        .map(|&tau| if score >= tau { 1.0 } else { 0.0 })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn mask3(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> Tensor<f64> {
        Tensor::from_fn(&[1, h, w], |i| {
            let (y, x) = ((i / w) % h, i % w);
            if f(y, x) {
                1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn iou_trivial_cases() {
        let a = mask3(4, 4, |y, _| y < 2);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let b = mask3(4, 4, |y, _| y >= 2);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        let empty = Tensor::<f64>::zeros(&[1, 4, 4]);
        assert_eq!(iou(&empty, &empty).unwrap(), 1.0);
    }

    #[test]
    fn iou_matches_pixel_loop_oracle() {
        let mut rng = crate::rng::stream(1, "metric", 0);
        for _ in 0..50 {
            let a = Tensor::<f64>::from_fn(&[1, 8, 8], |_| rng.gen_range(0..2) as f64);
            let b = Tensor::<f64>::from_fn(&[1, 8, 8], |_| rng.gen_range(0..2) as f64);
            let (mut inter, mut uni) = (0usize, 0usize);
            for i in 0..64 {
                let (x, y) = (a.data()[i] == 1.0, b.data()[i] == 1.0);
                inter += (x && y) as usize;
                uni += (x || y) as usize;
            }
            let expect = if uni == 0 {
                1.0
            } else {
                inter as f64 / uni as f64
            };
            assert_eq!(iou(&a, &b).unwrap(), expect);
            // symmetry
            assert_eq!(iou(&a, &b).unwrap(), iou(&b, &a).unwrap());
        }
    }

    #[test]
    fn boundary_f_trivial_cases() {
        let a = mask3(8, 8, |y, x| (2..6).contains(&y) && (2..6).contains(&x));
        assert_eq!(boundary_f(&a, &a, 1.0).unwrap(), 1.0);
        let empty = Tensor::<f64>::zeros(&[1, 8, 8]);
        assert_eq!(boundary_f(&empty, &a, 1.0).unwrap(), 0.0);
        // both degenerate
        assert_eq!(boundary_f(&empty, &empty, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn shifted_square_scores_one_at_tolerance_one() {
        let a = mask3(8, 8, |y, x| (2..5).contains(&y) && (2..5).contains(&x));
        let b = mask3(8, 8, |y, x| (2..5).contains(&y) && (3..6).contains(&x));
        assert_eq!(boundary_f(&a, &b, 1.0).unwrap(), 1.0);
        // at zero tolerance only exactly overlapping contour pixels match.
        // hand enumeration: each 3x3 square has a 24-pixel contour ring
        // (5x5 dilation minus its 1-pixel erosion); the rings of the two
        // unit-shifted squares share 18 pixels, so P = R = 18/24.
        let f0 = boundary_f(&a, &b, 0.0).unwrap();
        assert!((f0 - 0.75).abs() < 1e-12, "got {f0}");
    }

    #[test]
    fn boundary_f_is_symmetric() {
        let mut rng = crate::rng::stream(2, "metric", 0);
        for _ in 0..20 {
            let a = Tensor::<f64>::from_fn(&[1, 8, 8], |_| rng.gen_range(0..2) as f64);
            let b = Tensor::<f64>::from_fn(&[1, 8, 8], |_| rng.gen_range(0..2) as f64);
            let ab = boundary_f(&a, &b, 1.0).unwrap();
            let ba = boundary_f(&b, &a, 1.0).unwrap();
            assert!((ab - ba).abs() < 1e-12);
        }
    }

    #[test]
    fn success_rate_trivial_cases() {
        let gt_box = BoundingBox {
            y0: 2,
            x0: 2,
            y1: 5,
            x1: 5,
        };
        let exact = Tensor::<f64>::from_fn(&[8, 8], |i| {
            let (y, x) = (i / 8, i % 8);
            ((2..=5).contains(&y) && (2..=5).contains(&x)) as u8 as f64
        });
        let ind = success_rate(&exact, &gt_box, &SR_THRESHOLDS).unwrap();
        assert!(ind.iter().all(|&v| v == 1.0));

        let empty = Tensor::<f64>::zeros(&[8, 8]);
        let ind = success_rate(&empty, &gt_box, &SR_THRESHOLDS).unwrap();
        assert!(ind.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn largest_component_wins() {
        // a 2-pixel blob and a 6-pixel blob; the box must come from the
        // bigger one (verified against a brute-force component scan)
        let m = Tensor::<f64>::from_fn(&[8, 8], |i| {
            let (y, x) = (i / 8, i % 8);
            let small = y == 0 && x < 2;
            let big = (5..7).contains(&y) && (3..6).contains(&x);
            (small || big) as u8 as f64
        });
        let bb = largest_component_box(m.data(), 8, 8).unwrap();
        assert_eq!(
            bb,
            BoundingBox {
                y0: 5,
                x0: 3,
                y1: 6,
                x1: 5
            }
        );
        // brute force: enumerate all components by repeated flood fill
        let mut sizes = alloc::vec::Vec::new();
        let mut seen = [false; 64];
        for s in 0..64 {
            if m.data()[s] != 1.0 || seen[s] {
                continue;
            }
            let mut stack = alloc::vec![s];
            seen[s] = true;
            let mut count = 0;
            while let Some(p) = stack.pop() {
                count += 1;
                let (y, x) = (p / 8, p % 8);
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let (ny, nx) = (y as isize + dy, x as isize + dx);
                        if ny < 0 || ny >= 8 || nx < 0 || nx >= 8 {
                            continue;
                        }
                        let q = (ny * 8 + nx) as usize;
                        if m.data()[q] == 1.0 && !seen[q] {
                            seen[q] = true;
                            stack.push(q);
                        }
                    }
                }
            }
            sizes.push(count);
        }
        sizes.sort_unstable();
        assert_eq!(sizes, alloc::vec![2, 6]);
    }

    #[test]
    fn metrics_decrease_under_erosion_toward_empty() {
        // nested masks shrinking toward empty: J and F never increase
        let gt = mask3(12, 12, |y, x| (2..10).contains(&y) && (2..10).contains(&x));
        let mut prev_j = 1.0;
        let mut prev_f = 1.0;
        for shrink in 0..4usize {
            let pred = mask3(12, 12, |y, x| {
                (2 + shrink..10 - shrink).contains(&y) && (2 + shrink..10 - shrink).contains(&x)
            });
            let j = iou(&pred, &gt).unwrap();
            let f = boundary_f(&pred, &gt, 1.0).unwrap();
            assert!(j <= prev_j + 1e-12, "J increased under erosion");
            assert!(f <= prev_f + 1e-12, "F increased under erosion");
            prev_j = j;
            prev_f = f;
        }
    }
}

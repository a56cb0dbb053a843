//! Central-finite-difference verification of reverse-mode gradients.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::{s, Scalar};
use crate::tensor::graph::Graph;
use crate::tensor::{Tensor, Var};

/// Compares the reverse-mode gradient of a scalar-valued function against
/// `(f(x+h) - f(x-h)) / 2h`, element-wise over every parameter, and returns
/// the maximum relative error with denominator `max(|analytic|, |numeric|,
/// 1e-8)`.
pub fn grad_check<T, F>(f: F, params: &[Tensor<T>], h: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&Graph<T>, &[Var<T>]) -> Result<Var<T>>,
{
    grad_check_tampered(f, params, h, None)
}

/// `grad_check` with an optional deliberate perturbation of one analytic
/// gradient element, used to self-test that the checker reports faults.
pub fn grad_check_tampered<T, F>(
    f: F,
    params: &[Tensor<T>],
    h: T,
    tamper: Option<(usize, usize, T)>,
) -> Result<T>
where
    T: Scalar,
    F: Fn(&Graph<T>, &[Var<T>]) -> Result<Var<T>>,
{
    grad_check_refined(f, params, &[h], tamper)
}

/// Per-element refinement over a ladder of finite-difference steps: an
/// element's error is the best agreement over the candidate steps, so
/// elements limited by truncation (large h), by roundoff against the 1e-8
/// floor (small h), or by a nearby ReLU kink each get a step that resolves
/// them. A genuinely wrong analytic gradient disagrees at every step and
/// is still reported.
pub fn grad_check_refined<T, F>(
    f: F,
    params: &[Tensor<T>],
    steps: &[T],
    tamper: Option<(usize, usize, T)>,
) -> Result<T>
where
    T: Scalar,
    F: Fn(&Graph<T>, &[Var<T>]) -> Result<Var<T>>,
{
    let Some((&h, rest)) = steps.split_first() else {
        return Err(Error::Config("grad_check needs at least one step".into()));
    };
    if steps.iter().any(|&h| h <= T::zero()) {
        return Err(Error::Config(format!("grad_check step {h} must be > 0")));
    }
    // analytic gradients from one recorded pass
    let graph = Graph::new();
    let vars: Vec<Var<T>> = params.iter().map(|p| graph.var(p.clone())).collect();
    let loss = f(&graph, &vars)?;
    if loss.value.len() != 1 {
        return Err(Error::Shape {
            op: "grad_check",
            detail: format!("function must be scalar, got {:?}", loss.value.dims()),
        });
    }
    if !loss.value.data()[0].is_finite() {
        return Err(Error::Eval("grad_check: non-finite function value".into()));
    }
    let grads = graph.backward(&loss)?;
    let mut analytic: Vec<Vec<T>> = Vec::with_capacity(params.len());
    for v in &vars {
        analytic.push(match grads.get(v) {
            Some(g) => g.to_vec(),
            None => alloc::vec![T::zero(); v.value.len()],
        });
    }
    if let Some((pi, ei, delta)) = tamper {
        analytic[pi][ei] = analytic[pi][ei] + delta;
    }

    let eval = |tensors: &[Tensor<T>]| -> Result<T> {
        let g = Graph::eval();
        let vs: Vec<Var<T>> = tensors.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&g, &vs)?;
        let v = out.value.data()[0];
        if !v.is_finite() {
            return Err(Error::Eval("grad_check: non-finite function value".into()));
        }
        Ok(v)
    };

    let floor = s::<T>(1e-8);
    let mut work: Vec<Tensor<T>> = params.to_vec();
    let mut central = |pi: usize, ei: usize, h: T| -> Result<T> {
        let p = &params[pi];
        let orig = p.data()[ei];
        let mut bumped = p.data().to_vec();
        bumped[ei] = orig + h;
        work[pi] = Tensor::new(p.dims(), bumped)?;
        let up = eval(&work)?;
        let mut dipped = p.data().to_vec();
        dipped[ei] = orig - h;
        work[pi] = Tensor::new(p.dims(), dipped)?;
        let down = eval(&work)?;
        work[pi] = p.clone();
        Ok((up - down) / (h + h))
    };
    let rel_of = |a: T, numeric: T| -> T {
        let denom = a.abs().max(numeric.abs()).max(floor);
        (a - numeric).abs() / denom
    };
    let mut max_rel = T::zero();
    for (pi, p) in params.iter().enumerate() {
        for ei in 0..p.len() {
            let a = analytic[pi][ei];
            let mut rel = rel_of(a, central(pi, ei, h)?);
            for &h2 in rest {
                if rel <= max_rel {
                    break; // cannot raise the maximum any further
                }
                rel = rel.min(rel_of(a, central(pi, ei, h2)?));
            }
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

/// Convenience wrapper for single-tensor functions.
#[cfg(test)]
pub(crate) fn grad_check_unary<T, F>(f: F, x: &Tensor<T>, h: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&Graph<T>, &Var<T>) -> Result<Var<T>>,
{
    grad_check(|g, vars| f(g, &vars[0]), core::slice::from_ref(x), h)
}

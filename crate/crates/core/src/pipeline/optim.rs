//! Decoupled-weight-decay adaptive-moment optimizer.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state keyed by parameter name. Parameters with no gradient in
/// a step still receive the decoupled weight-decay update.
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    t: u64,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over all parameters, visited via the provided iterator
    /// function. `grads` maps parameter names to gradient buffers; missing
    /// entries mean zero gradient.
    pub fn step(
        &mut self,
        grads: &BTreeMap<String, Vec<T>>,
        mut for_each_param: impl FnMut(&mut dyn FnMut(&str, &mut Tensor<T>)),
    ) -> Result<()> {
        self.t += 1;
        let lr = s::<T>(self.cfg.lr);
        let wd = s::<T>(self.cfg.weight_decay);
        let b1 = s::<T>(self.cfg.beta1);
        let b2 = s::<T>(self.cfg.beta2);
        let eps = s::<T>(self.cfg.eps);
        let bc1 = T::one() - s::<T>(self.cfg.beta1.powi(self.t as i32));
        let bc2 = T::one() - s::<T>(self.cfg.beta2.powi(self.t as i32));
        let mut failure: Option<Error> = None;
        let (m_map, v_map, t_step) = (&mut self.m, &mut self.v, self.t);
        let _ = t_step;
        for_each_param(&mut |name, tensor| {
            if failure.is_some() {
                return;
            }
            let n = tensor.len();
            let zero_grad;
            let grad: &[T] = match grads.get(name) {
                Some(gv) => {
                    if gv.len() != n {
                        failure = Some(Error::Shape {
                            op: "adamw_step",
                            detail: alloc::format!(
                                "gradient for {name} has {} values, parameter has {n}",
                                gv.len()
                            ),
                        });
                        return;
                    }
                    gv
                }
                None => {
                    zero_grad = vec![T::zero(); n];
                    // borrow trick: fall through with a zero buffer
                    return update_param(
                        tensor, &zero_grad, m_map, v_map, name, lr, wd, b1, b2, eps, bc1, bc2,
                    );
                }
            };
            update_param(tensor, grad, m_map, v_map, name, lr, wd, b1, b2, eps, bc1, bc2);
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn update_param<T: Scalar>(
    tensor: &mut Tensor<T>,
    grad: &[T],
    m_map: &mut BTreeMap<String, Vec<T>>,
    v_map: &mut BTreeMap<String, Vec<T>>,
    name: &str,
    lr: T,
    wd: T,
    b1: T,
    b2: T,
    eps: T,
    bc1: T,
    bc2: T,
) {
    let n = tensor.len();
    let m = m_map
        .entry(String::from(name))
        .or_insert_with(|| vec![T::zero(); n]);
    let v = v_map
        .entry(String::from(name))
        .or_insert_with(|| vec![T::zero(); n]);
    let mut data = tensor.data().to_vec();
    for i in 0..n {
        let gi = grad[i];
        m[i] = b1 * m[i] + (T::one() - b1) * gi;
        v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        data[i] = data[i] - lr * (m_hat / (v_hat.sqrt() + eps)) - lr * wd * data[i];
    }
    *tensor = Tensor::new(tensor.dims(), data).expect("same dims");
}

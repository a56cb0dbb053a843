//! Input corruptions over normalized videos: additive Gaussian noise,
//! salt-and-pepper on randomly chosen channels, and multiplicative speckle.

use alloc::format;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKind {
    Gaussian,
    SaltPepper,
    Speckle,
}

impl NoiseKind {
    pub fn name(&self) -> &'static str {
        match self {
            NoiseKind::Gaussian => "gaussian",
            NoiseKind::SaltPepper => "salt_pepper",
            NoiseKind::Speckle => "speckle",
        }
    }
}

/// Applies noise to a `[t,h,w,3]` video in normalized range.
///
/// Gaussian: adds `N(0, magnitude²)` to every value. Salt/pepper:
/// `magnitude` is the fraction of pixel values altered; each altered pixel
/// has one randomly selected channel set to 0 or 1 (half and half).
/// Speckle: `x + x·(magnitude·y)` with standard normal `y`. Magnitude 0
/// returns the input unchanged for every kind.
pub fn corrupt<T: Scalar>(
    video: &Tensor<T>,
    kind: NoiseKind,
    magnitude: f64,
    seed: u64,
) -> Result<Tensor<T>> {
    if magnitude < 0.0 {
        return Err(Error::Config(format!(
            "noise magnitude {magnitude} must be nonnegative"
        )));
    }
    let d = video.dims();
    if d.len() != 4 || d[3] != 3 {
        return Err(Error::Shape {
            op: "corrupt",
            detail: format!("expected [t,h,w,3], got {d:?}"),
        });
    }
    if magnitude == 0.0 {
        return Ok(video.clone());
    }
    let mut rng = crate::rng::stream(seed, "corrupt", kind as u64);
    let mut data = video.data().to_vec();
    match kind {
        NoiseKind::Gaussian => {
            for v in data.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = *v + s::<T>(magnitude * z);
            }
        }
        NoiseKind::SaltPepper => {
            // "magnitude" counts altered values out of all t*h*w*3 values;
            // one channel per hit pixel, so pixels are hit at 3x that rate
            let p_pixel = (magnitude * 3.0).min(1.0);
            let pixels = d[0] * d[1] * d[2];
            for px in 0..pixels {
                if rng.gen_range(0.0..1.0) >= p_pixel {
                    continue;
                }
                let c = rng.gen_range(0..3usize);
                let salt = rng.gen_range(0..2u8) == 1;
                data[px * 3 + c] = if salt { T::one() } else { T::zero() };
            }
        }
        NoiseKind::Speckle => {
            for v in data.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = *v + *v * s::<T>(magnitude * z);
            }
        }
    }
    Tensor::new(d, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn video(seed: u64) -> Tensor<f64> {
        let mut rng = crate::rng::stream(seed, "corrupt-test", 0);
        Tensor::from_fn(&[1, 10, 10, 3], |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn zero_magnitude_is_bitwise_identity_for_all_kinds() {
        let v = video(1);
        for kind in [NoiseKind::Gaussian, NoiseKind::SaltPepper, NoiseKind::Speckle] {
            let out = corrupt(&v, kind, 0.0, 7).unwrap();
            assert!(out.bits_eq(&v), "{kind:?}");
        }
    }

    #[test]
    fn salt_pepper_alters_the_expected_count_of_values() {
        // 100x100 frame, magnitude 0.002: expect 60 altered values out of
        // 30000; binomial sigma ~7.7, accept within 4 sigma
        let mut rng = crate::rng::stream(2, "corrupt-test", 0);
        let v = Tensor::<f64>::from_fn(&[1, 100, 100, 3], |_| rng.gen_range(0.25..0.75));
        let out = corrupt(&v, NoiseKind::SaltPepper, 0.002, 3).unwrap();
        let changed = v
            .data()
            .iter()
            .zip(out.data())
            .filter(|(a, b)| a != b)
            .count();
        // one value changes per hit pixel: Binomial(10000, 0.006),
        // mean 60, sigma ~7.72; accept within 4 sigma
        let expected = 60.0;
        let sigma = (10000.0f64 * 0.006 * 0.994).sqrt();
        assert!(
            (changed as f64 - expected).abs() <= 4.0 * sigma,
            "changed {changed}"
        );
        // altered values are exactly 0 or 1
        for (a, b) in v.data().iter().zip(out.data()) {
            if a != b {
                assert!(*b == 0.0 || *b == 1.0);
            }
        }
    }

    #[test]
    fn speckle_fixes_zero_signal() {
        let v = Tensor::<f64>::zeros(&[1, 4, 4, 3]);
        let out = corrupt(&v, NoiseKind::Speckle, 1.0, 5).unwrap();
        assert!(out.bits_eq(&v));
    }

    #[test]
    fn gaussian_noise_has_the_right_scale() {
        let v = Tensor::<f64>::filled(&[1, 40, 40, 3], 0.5);
        let out = corrupt(&v, NoiseKind::Gaussian, 0.1, 6).unwrap();
        let n = out.len() as f64;
        let mean: f64 = out.data().iter().sum::<f64>() / n;
        let var: f64 = out.data().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
        assert!((var.sqrt() - 0.1).abs() < 0.01, "std {}", var.sqrt());
    }

    #[test]
    fn fixed_seed_reproduces_and_distinct_seeds_decorrelate() {
        let v = video(7);
        let a = corrupt(&v, NoiseKind::SaltPepper, 0.05, 11).unwrap();
        let b = corrupt(&v, NoiseKind::SaltPepper, 0.05, 11).unwrap();
        assert!(a.bits_eq(&b));
        let c = corrupt(&v, NoiseKind::SaltPepper, 0.05, 12).unwrap();
        assert!(!a.bits_eq(&c));
        // positions differ between seeds
        let pos_a: alloc::vec::Vec<usize> = v
            .data()
            .iter()
            .zip(a.data())
            .enumerate()
            .filter(|(_, (x, y))| x != y)
            .map(|(i, _)| i)
            .collect();
        let pos_c: alloc::vec::Vec<usize> = v
            .data()
            .iter()
            .zip(c.data())
            .enumerate()
            .filter(|(_, (x, y))| x != y)
            .map(|(i, _)| i)
            .collect();
        assert_ne!(pos_a, pos_c);
    }

    #[test]
    fn negative_magnitude_is_rejected() {
        let v = video(8);
        assert!(matches!(
            corrupt(&v, NoiseKind::Gaussian, -0.1, 0),
            Err(Error::Config(_))
        ));
    }
}

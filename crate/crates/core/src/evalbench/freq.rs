//! Frequency-content filters: spatial Gaussian low-pass at the published
//! (size, std) pairs, and a high-pass built as the complement of the
//! Butterworth-style response `F = 1/(1 + D/D₀)` applied in the Fourier
//! domain (so `H(0) = 0` removes the DC component).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;

/// Published low-pass grid: filter size paired with its standard deviation.
pub const LOWPASS_TABLE: [(usize, f64); 4] = [(5, 1.1), (7, 1.4), (9, 1.7), (11, 2.0)];

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FreqFilter {
    LowpassGaussian { size: usize, std: f64 },
    HighpassBwComplement { d0: f64 },
}

impl FreqFilter {
    /// Looks a size up in the published table.
    pub fn lowpass_from_table(size: usize) -> Result<Self> {
        LOWPASS_TABLE
            .iter()
            .find(|(s, _)| *s == size)
            .map(|&(size, std)| FreqFilter::LowpassGaussian { size, std })
            .ok_or_else(|| {
                Error::Config(format!(
                    "filter size {size} is not in the low-pass table {LOWPASS_TABLE:?}"
                ))
            })
    }

    pub fn label(&self) -> alloc::string::String {
        match self {
            FreqFilter::LowpassGaussian { size, std } => format!("lowpass_{size}({std})"),
            FreqFilter::HighpassBwComplement { d0 } => format!("highpass_d0_{d0}"),
        }
    }
}

/// Applies a frequency filter to a `[t,h,w,3]` video, per frame and
/// channel.
pub fn frequency_filter<T: Scalar>(video: &Tensor<T>, filter: FreqFilter) -> Result<Tensor<T>> {
    let d = video.dims();
    if d.len() != 4 || d[3] != 3 {
        return Err(Error::Shape {
            op: "frequency_filter",
            detail: format!("expected [t,h,w,3], got {d:?}"),
        });
    }
    match filter {
        FreqFilter::LowpassGaussian { size, std } => {
            if size % 2 == 0 || std <= 0.0 {
                return Err(Error::Config(format!(
                    "low-pass needs odd size and positive std, got {size}({std})"
                )));
            }
            Ok(gaussian_blur(video, size, std))
        }
        FreqFilter::HighpassBwComplement { d0 } => {
            if d0 <= 0.0 {
                return Err(Error::Config(format!("cutoff {d0} must be positive")));
            }
            highpass(video, d0)
        }
    }
}

/// Separable Gaussian blur with border renormalization, so constants map
/// to themselves exactly (up to rounding).
fn gaussian_blur<T: Scalar>(video: &Tensor<T>, size: usize, std: f64) -> Tensor<T> {
    let d = video.dims();
    let (t, h, w) = (d[0], d[1], d[2]);
    let half = (size / 2) as isize;
    let kernel: Vec<f64> = (0..size)
        .map(|i| {
            let x = i as isize - half;
            (-((x * x) as f64) / (2.0 * std * std)).exp()
        })
        .collect();
    let mut data: Vec<f64> = video
        .data()
        .iter()
        .map(|v| v.to_f64().unwrap_or(0.0))
        .collect();
    // horizontal then vertical pass, renormalizing by the in-frame mass
    let mut tmp = vec![0.0f64; data.len()];
    for ti in 0..t {
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let mut acc = 0.0;
                    let mut mass = 0.0;
                    for (ki, kv) in kernel.iter().enumerate() {
                        let xi = x as isize + ki as isize - half;
                        if xi < 0 || xi >= w as isize {
                            continue;
                        }
                        acc += kv * data[((ti * h + y) * w + xi as usize) * 3 + c];
                        mass += kv;
                    }
                    tmp[((ti * h + y) * w + x) * 3 + c] = acc / mass;
                }
            }
        }
    }
    for ti in 0..t {
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let mut acc = 0.0;
                    let mut mass = 0.0;
                    for (ki, kv) in kernel.iter().enumerate() {
                        let yi = y as isize + ki as isize - half;
                        if yi < 0 || yi >= h as isize {
                            continue;
                        }
                        acc += kv * tmp[((ti * h + yi as usize) * w + x) * 3 + c];
                        mass += kv;
                    }
                    data[((ti * h + y) * w + x) * 3 + c] = acc / mass;
                }
            }
        }
    }
    Tensor::new(d, data.into_iter().map(|v| s::<T>(v)).collect()).expect("same dims")
}

/// Separable direct DFT over one real channel plane; desk resolutions keep
/// the quadratic cost acceptable.
struct Dft {
    cos: Vec<f64>,
    sin: Vec<f64>,
    n: usize,
}

impl Dft {
    fn new(n: usize) -> Self {
        let tau = core::f64::consts::TAU;
        let mut cos = vec![0.0; n * n];
        let mut sin = vec![0.0; n * n];
        for k in 0..n {
            for j in 0..n {
                let ang = tau * (k * j % n) as f64 / n as f64;
                cos[k * n + j] = ang.cos();
                sin[k * n + j] = ang.sin();
            }
        }
        Dft { cos, sin, n }
    }

    /// forward: sign = -1; inverse: sign = +1 with 1/n applied by caller
    fn transform(&self, re: &[f64], im: &[f64], sign: f64) -> (Vec<f64>, Vec<f64>) {
        let n = self.n;
        let mut out_re = vec![0.0; n];
        let mut out_im = vec![0.0; n];
        for k in 0..n {
            let mut ar = 0.0;
            let mut ai = 0.0;
            for j in 0..n {
                let c = self.cos[k * n + j];
                let sn = sign * self.sin[k * n + j];
                ar += re[j] * c - im[j] * sn;
                ai += re[j] * sn + im[j] * c;
            }
            out_re[k] = ar;
            out_im[k] = ai;
        }
        (out_re, out_im)
    }
}

fn highpass<T: Scalar>(video: &Tensor<T>, d0: f64) -> Result<Tensor<T>> {
    let dims = video.dims();
    let (t, h, w) = (dims[0], dims[1], dims[2]);
    let dft_h = Dft::new(h);
    let dft_w = Dft::new(w);
    let mut out = vec![T::zero(); video.len()];
    // response H(u,v) = 1 - 1/(1 + D/D0), D in cycles-per-image units
    let response = |u: usize, v: usize| -> f64 {
        let fu = if u <= h / 2 { u as f64 } else { u as f64 - h as f64 };
        let fv = if v <= w / 2 { v as f64 } else { v as f64 - w as f64 };
        let dist = (fu * fu + fv * fv).sqrt();
        1.0 - 1.0 / (1.0 + dist / d0)
    };
    for ti in 0..t {
        for c in 0..3 {
            // gather the channel plane
            let mut re = vec![0.0f64; h * w];
            let im = vec![0.0f64; h * w];
            for y in 0..h {
                for x in 0..w {
                    re[y * w + x] = video.data()[((ti * h + y) * w + x) * 3 + c]
                        .to_f64()
                        .unwrap_or(0.0);
                }
            }
            let (mut fre, mut fim) = (re, im);
            // row DFTs then column DFTs
            for y in 0..h {
                let row_re: Vec<f64> = fre[y * w..(y + 1) * w].to_vec();
                let row_im: Vec<f64> = fim[y * w..(y + 1) * w].to_vec();
                let (rr, ri) = dft_w.transform(&row_re, &row_im, -1.0);
                fre[y * w..(y + 1) * w].copy_from_slice(&rr);
                fim[y * w..(y + 1) * w].copy_from_slice(&ri);
            }
            for x in 0..w {
                let col_re: Vec<f64> = (0..h).map(|y| fre[y * w + x]).collect();
                let col_im: Vec<f64> = (0..h).map(|y| fim[y * w + x]).collect();
                let (cr, ci) = dft_h.transform(&col_re, &col_im, -1.0);
                for y in 0..h {
                    fre[y * w + x] = cr[y];
                    fim[y * w + x] = ci[y];
                }
            }
            for y in 0..h {
                for x in 0..w {
                    let hh = response(y, x);
                    fre[y * w + x] *= hh;
                    fim[y * w + x] *= hh;
                }
            }
            // inverse transform
            for y in 0..h {
                let row_re: Vec<f64> = fre[y * w..(y + 1) * w].to_vec();
                let row_im: Vec<f64> = fim[y * w..(y + 1) * w].to_vec();
                let (rr, ri) = dft_w.transform(&row_re, &row_im, 1.0);
                fre[y * w..(y + 1) * w].copy_from_slice(&rr);
                fim[y * w..(y + 1) * w].copy_from_slice(&ri);
            }
            for x in 0..w {
                let col_re: Vec<f64> = (0..h).map(|y| fre[y * w + x]).collect();
                let col_im: Vec<f64> = (0..h).map(|y| fim[y * w + x]).collect();
                let (cr, _ci) = dft_h.transform(&col_re, &col_im, 1.0);
                for y in 0..h {
                    fre[y * w + x] = cr[y];
                }
            }
            let norm = 1.0 / (h * w) as f64;
            for y in 0..h {
                for x in 0..w {
                    out[((ti * h + y) * w + x) * 3 + c] = s::<T>(fre[y * w + x] * norm);
                }
            }
        }
    }
    Tensor::new(dims, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn energy(v: &Tensor<f64>) -> f64 {
        v.data().iter().map(|x| x * x).sum()
    }

    #[test]
    fn lowpass_preserves_constants() {
        let v = Tensor::<f64>::filled(&[1, 12, 12, 3], 0.42);
        for (size, std) in LOWPASS_TABLE {
            let out =
                frequency_filter(&v, FreqFilter::LowpassGaussian { size, std }).unwrap();
            for x in out.data() {
                assert!((x - 0.42).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lowpass_matches_direct_convolution_oracle() {
        let mut rng = crate::rng::stream(1, "freq", 0);
        let v = Tensor::<f64>::from_fn(&[1, 8, 8], |_| rng.gen_range(0.0..1.0));
        let v3 = Tensor::<f64>::from_fn(&[1, 8, 8, 3], |i| v.data()[i / 3]);
        let (size, std) = LOWPASS_TABLE[0];
        let out = frequency_filter(&v3, FreqFilter::LowpassGaussian { size, std }).unwrap();
        // direct 2D renormalized convolution oracle
        let half = size as isize / 2;
        for y in 0..8isize {
            for x in 0..8isize {
                let mut acc = 0.0;
                let mut mass = 0.0;
                for dy in -half..=half {
                    for dx in -half..=half {
                        let (ny, nx) = (y + dy, x + dx);
                        if ny < 0 || ny >= 8 || nx < 0 || nx >= 8 {
                            continue;
                        }
                        let wgt = (-((dy * dy) as f64) / (2.0 * std * std)).exp()
                            * (-((dx * dx) as f64) / (2.0 * std * std)).exp();
                        acc += wgt * v.data()[(ny * 8 + nx) as usize];
                        mass += wgt;
                    }
                }
                let got = out.data()[((y * 8 + x) * 3) as usize];
                assert!(
                    (got - acc / mass).abs() < 1e-9,
                    "at ({y},{x}): {got} vs {}",
                    acc / mass
                );
            }
        }
    }

    #[test]
    fn highpass_removes_dc() {
        let v = Tensor::<f64>::filled(&[1, 8, 8, 3], 0.7);
        let out = frequency_filter(&v, FreqFilter::HighpassBwComplement { d0: 10.0 }).unwrap();
        for x in out.data() {
            assert!(x.abs() < 1e-10, "residual {x}");
        }
    }

    #[test]
    fn huge_cutoff_kills_all_energy() {
        let mut rng = crate::rng::stream(2, "freq", 0);
        let v = Tensor::<f64>::from_fn(&[1, 16, 16, 3], |_| rng.gen_range(0.0..1.0));
        let out =
            frequency_filter(&v, FreqFilter::HighpassBwComplement { d0: 1e9 }).unwrap();
        // H = 1 - 1/(1 + D/D0) -> 0 everywhere as D0 grows
        assert!(energy(&out) < 1e-10 * energy(&v));
    }

    #[test]
    fn highpass_then_lowpass_attenuates_energy() {
        let mut rng = crate::rng::stream(3, "freq", 0);
        let v = Tensor::<f64>::from_fn(&[1, 16, 16, 3], |_| rng.gen_range(0.0..1.0));
        let hp = frequency_filter(&v, FreqFilter::HighpassBwComplement { d0: 10.0 }).unwrap();
        let both = frequency_filter(
            &hp,
            FreqFilter::LowpassGaussian {
                size: 5,
                std: 1.1,
            },
        )
        .unwrap();
        assert!(energy(&both) < energy(&v));
    }

    #[test]
    fn highpass_keeps_an_oscillating_pattern() {
        // alternating columns carry the highest horizontal frequency, which
        // the complement filter passes with H close to 1
        let v = Tensor::<f64>::from_fn(&[1, 16, 16, 3], |i| {
            let x = (i / 3) % 16;
            if x % 2 == 0 {
                1.0
            } else {
                -1.0
            }
        });
        let out = frequency_filter(&v, FreqFilter::HighpassBwComplement { d0: 1.0 }).unwrap();
        assert!(energy(&out) > 0.7 * energy(&v));
    }

    #[test]
    fn table_lookup_rejects_unknown_sizes() {
        assert!(FreqFilter::lowpass_from_table(7).is_ok());
        assert!(FreqFilter::lowpass_from_table(6).is_err());
    }
}

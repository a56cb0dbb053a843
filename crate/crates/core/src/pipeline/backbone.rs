//! Frozen backbone stand-in: a randomly initialized strided convolution
//! stack. Weights are fixed at construction and never appear in the
//! trainable parameter set, mirroring a pretrained feature extractor.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::msdecode::LevelDims;
use crate::scalar::Scalar;
use crate::tensor::{conv2d_kernel, Graph, Tensor};

/// One stride-2 3×3 stage; the tap is taken before the ReLU that feeds the
/// next stage.
#[derive(Clone, Debug)]
pub struct Backbone<T> {
    stages: Vec<(Tensor<T>, Tensor<T>)>,
    /// Channel width per level, coarsest first.
    widths: Vec<usize>,
}

impl<T: Scalar> Backbone<T> {
    /// `widths` are per-level channel counts, level 1 (coarsest) first.
    pub fn init(widths: &[usize], seed: u64) -> Result<Self> {
        if widths.is_empty() || widths.iter().any(|&w| w == 0) {
            return Err(Error::Config(format!(
                "backbone widths {widths:?} must be non-empty and positive"
            )));
        }
        let mut rng = crate::rng::stream(seed, "backbone", 0);
        let l = widths.len();
        let mut stages = Vec::with_capacity(l);
        let mut in_ch = 3;
        // stages run fine-to-coarse: stage i produces level L-i
        for i in 0..l {
            let out_ch = widths[l - 1 - i];
            let std = (2.0 / (9.0 * in_ch as f64)).sqrt();
            let w = Tensor::randn(&[3, 3, in_ch, out_ch], std, &mut rng);
            let b = Tensor::zeros(&[out_ch]);
            stages.push((w, b));
            in_ch = out_ch;
        }
        Ok(Backbone {
            stages,
            widths: widths.to_vec(),
        })
    }

    pub fn levels(&self) -> usize {
        self.stages.len()
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    /// Level extents for an input of `h × w`: level l spans
    /// `h / 2^(L+1-l)`, so the finest level is a 2× reduction and each
    /// coarser level halves again.
    pub fn level_dims(&self, t: usize, h: usize, w: usize) -> Result<Vec<LevelDims>> {
        let l = self.levels();
        let div = 1usize << (l + 1);
        if h % div != 0 || w % div != 0 {
            return Err(Error::Config(format!(
                "input {h}x{w} must be divisible by 2^(L+1) = {div} for L = {l}"
            )));
        }
        Ok((1..=l)
            .map(|lvl| {
                let f = 1usize << (l + 1 - lvl);
                LevelDims {
                    t,
                    h: h / f,
                    w: w / f,
                }
            })
            .collect())
    }

    /// Deterministic frozen pyramid, coarsest level first. Input is a
    /// `[t, h, w, 3]` clip (a single image is a `t = 1` clip).
    pub fn extract_pyramid(&self, video: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let d = video.dims();
        if d.len() != 4 || d[3] != 3 {
            return Err(Error::Shape {
                op: "extract_pyramid",
                detail: format!("expected [t,h,w,3], got {d:?}"),
            });
        }
        let (t, h, w) = (d[0], d[1], d[2]);
        self.level_dims(t, h, w)?; // validates divisibility
        let mut taps: Vec<Tensor<T>> = Vec::with_capacity(self.levels());
        let mut cur = video.clone();
        for (wt, bias) in &self.stages {
            let cd = cur.dims().to_vec();
            let (mut data, h_out, w_out) = conv2d_kernel(
                cur.data(),
                cd[0],
                cd[1],
                cd[2],
                cd[3],
                wt.data(),
                3,
                wt.dims()[3],
                2,
                1,
            );
            let cout = wt.dims()[3];
            for px in data.chunks_mut(cout) {
                for (v, b) in px.iter_mut().zip(bias.data()) {
                    *v = *v + *b;
                }
            }
            let tap = Tensor::new(&[cd[0], h_out, w_out, cout], data)?;
            // next stage consumes the rectified tap
            let relu: Vec<T> = tap.data().iter().map(|v| v.max(T::zero())).collect();
            cur = Tensor::new(tap.dims(), relu)?;
            taps.push(tap);
        }
        taps.reverse(); // coarsest first
        Ok(taps)
    }
}

/// Learnable 1×1 channel reduction used on raw backbone features in the
/// fully supervised path.
#[derive(Clone, Debug)]
pub struct ReduceConv<T> {
    pub w: Tensor<T>, // [1,1,cin,d]
    pub b: Tensor<T>, // [d]
}

impl<T: Scalar> ReduceConv<T> {
    pub fn init(cin: usize, d: usize, rng: &mut impl rand::Rng) -> Self {
        let std = (1.0 / cin as f64).sqrt();
        ReduceConv {
            w: Tensor::randn(&[1, 1, cin, d], std, rng),
            b: Tensor::zeros(&[d]),
        }
    }

    pub fn bind(&self, g: &Graph<T>, trainable: bool) -> ReduceVars<T> {
        ReduceVars {
            w: if trainable {
                g.var(self.w.clone())
            } else {
                g.constant(self.w.clone())
            },
            b: if trainable {
                g.var(self.b.clone())
            } else {
                g.constant(self.b.clone())
            },
        }
    }
}

pub struct ReduceVars<T: Scalar> {
    pub w: crate::tensor::Var<T>,
    pub b: crate::tensor::Var<T>,
}

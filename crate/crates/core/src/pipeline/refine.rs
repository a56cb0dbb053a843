//! Boundary refinement: a frozen patch-token self-attention stack over the
//! query video, fused with the upsampled comparator output, feeding two
//! parallel convolutional heads (mask and boundary). Only the fusion and
//! the heads are meta-trained; the attention stack stays frozen, standing
//! in for an externally pretrained module.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::Rng;

use crate::attention::{
    build_spatiotemporal_pe, multihead_attention, AttentionWeights, AttnVars,
    LayerNormWeights, LnVars,
};
use crate::error::{Error, Result};
use crate::msdecode::LevelDims;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Self-attention + FFN encoder block (pre-norm), used by the frozen
/// refinement stack.
#[derive(Clone, Debug)]
pub struct EncoderBlockWeights<T> {
    pub attn: AttentionWeights<T>,
    pub ln_attn: LayerNormWeights<T>,
    pub ffn_w1: Tensor<T>,
    pub ffn_b1: Tensor<T>,
    pub ffn_w2: Tensor<T>,
    pub ffn_b2: Tensor<T>,
    pub ln_ffn: LayerNormWeights<T>,
}

impl<T: Scalar> EncoderBlockWeights<T> {
    pub fn init(d: usize, n_heads: usize, std: f64, rng: &mut impl Rng) -> Result<Self> {
        Ok(EncoderBlockWeights {
            attn: AttentionWeights::init(d, n_heads, std, rng)?,
            ln_attn: LayerNormWeights::identity(d),
            ffn_w1: Tensor::randn(&[d, 4 * d], std, rng),
            ffn_b1: Tensor::zeros(&[4 * d]),
            ffn_w2: Tensor::randn(&[4 * d, d], std, rng),
            ffn_b2: Tensor::zeros(&[d]),
            ln_ffn: LayerNormWeights::identity(d),
        })
    }

    pub(crate) fn bind(&self, g: &Graph<T>, trainable: bool) -> EncoderBlockVars<T> {
        let b = |t: &Tensor<T>| {
            if trainable {
                g.var(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        EncoderBlockVars {
            attn: self.attn.bind(g, trainable),
            ln_attn: self.ln_attn.bind(g, trainable),
            ffn_w1: b(&self.ffn_w1),
            ffn_b1: b(&self.ffn_b1),
            ffn_w2: b(&self.ffn_w2),
            ffn_b2: b(&self.ffn_b2),
            ln_ffn: self.ln_ffn.bind(g, trainable),
        }
    }
}

pub struct EncoderBlockVars<T: Scalar> {
    attn: AttnVars<T>,
    ln_attn: LnVars<T>,
    ffn_w1: Var<T>,
    ffn_b1: Var<T>,
    ffn_w2: Var<T>,
    ffn_b2: Var<T>,
    ln_ffn: LnVars<T>,
}

fn encoder_block<T: Scalar>(
    g: &Graph<T>,
    x: &Var<T>,
    w: &EncoderBlockVars<T>,
) -> Result<Var<T>> {
    let n = g.layer_norm_rows(x, &w.ln_attn.gamma, &w.ln_attn.beta)?;
    let att = multihead_attention(g, &n, &n, &n, &w.attn)?;
    let x = g.add(x, &att)?;
    let n = g.layer_norm_rows(&x, &w.ln_ffn.gamma, &w.ln_ffn.beta)?;
    let h = g.relu(&g.add_row_broadcast(&g.matmul(&n, &w.ffn_w1)?, &w.ffn_b1)?)?;
    let h = g.add_row_broadcast(&g.matmul(&h, &w.ffn_w2)?, &w.ffn_b2)?;
    g.add(&x, &h)
}

/// Refinement module weights. The patch embedding and attention stack are
/// frozen; `fuse_*` and the two head convolutions are the trainable
/// "refine heads" group.
#[derive(Clone, Debug)]
pub struct RefineWeights<T> {
    pub patch: usize,
    pub dim: usize,
    pub embed_w: Tensor<T>,
    pub embed_b: Tensor<T>,
    pub blocks: Vec<EncoderBlockWeights<T>>,
    pub fuse_w: Tensor<T>,
    pub fuse_b: Tensor<T>,
    pub head_mask_w: Tensor<T>,
    pub head_mask_b: Tensor<T>,
    pub head_bdry_w: Tensor<T>,
    pub head_bdry_b: Tensor<T>,
}

impl<T: Scalar> RefineWeights<T> {
    pub fn init(
        patch: usize,
        dim: usize,
        layers: usize,
        n_heads: usize,
        decoder_d: usize,
        fuse_channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if patch == 0 {
            return Err(Error::Config("patch size must be positive".into()));
        }
        let pin = patch * patch * 3;
        let blocks = (0..layers)
            .map(|_| EncoderBlockWeights::init(dim, n_heads, 0.08, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(RefineWeights {
            patch,
            dim,
            embed_w: Tensor::randn(&[pin, dim], (1.0 / pin as f64).sqrt(), rng),
            embed_b: Tensor::zeros(&[dim]),
            blocks,
            fuse_w: Tensor::randn(
                &[decoder_d + dim, fuse_channels],
                (1.0 / (decoder_d + dim) as f64).sqrt(),
                rng,
            ),
            fuse_b: Tensor::zeros(&[fuse_channels]),
            head_mask_w: Tensor::randn(
                &[3, 3, fuse_channels, 1],
                (1.0 / (9.0 * fuse_channels as f64)).sqrt(),
                rng,
            ),
            head_mask_b: Tensor::zeros(&[1]),
            head_bdry_w: Tensor::randn(
                &[3, 3, fuse_channels, 1],
                (1.0 / (9.0 * fuse_channels as f64)).sqrt(),
                rng,
            ),
            head_bdry_b: Tensor::zeros(&[1]),
        })
    }

    pub fn bind(&self, g: &Graph<T>, heads_trainable: bool) -> RefineVars<T> {
        let trainable = |t: &Tensor<T>| {
            if heads_trainable {
                g.var(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        RefineVars {
            patch: self.patch,
            dim: self.dim,
            embed_w: g.constant(self.embed_w.clone()),
            embed_b: g.constant(self.embed_b.clone()),
            blocks: self.blocks.iter().map(|b| b.bind(g, false)).collect(),
            fuse_w: trainable(&self.fuse_w),
            fuse_b: trainable(&self.fuse_b),
            head_mask_w: trainable(&self.head_mask_w),
            head_mask_b: trainable(&self.head_mask_b),
            head_bdry_w: trainable(&self.head_bdry_w),
            head_bdry_b: trainable(&self.head_bdry_b),
        }
    }
}

pub struct RefineVars<T: Scalar> {
    pub patch: usize,
    pub dim: usize,
    pub(crate) embed_w: Var<T>,
    pub(crate) embed_b: Var<T>,
    pub(crate) blocks: Vec<EncoderBlockVars<T>>,
    pub fuse_w: Var<T>,
    pub fuse_b: Var<T>,
    pub head_mask_w: Var<T>,
    pub head_mask_b: Var<T>,
    pub head_bdry_w: Var<T>,
    pub head_bdry_b: Var<T>,
}

/// Mask and boundary logits at input resolution.
pub struct PredVars<T: Scalar> {
    pub mask: Var<T>,
    pub boundary: Option<Var<T>>,
}

/// Logit maps extracted from a forward pass.
#[derive(Clone, Debug)]
pub struct Prediction<T> {
    pub mask_logits: Tensor<T>,
    pub boundary_logits: Option<Tensor<T>>,
}

impl<T: Scalar> PredVars<T> {
    pub fn detach(&self) -> Prediction<T> {
        Prediction {
            mask_logits: self.mask.value.clone(),
            boundary_logits: self.boundary.as_ref().map(|b| b.value.clone()),
        }
    }
}

/// Runs the refinement path: patch-embeds each query frame, contextualizes
/// the patch tokens with the frozen attention stack, fuses them with the
/// upsampled comparator output by channel concatenation + 1×1 conv, and
/// emits mask and boundary logits from two parallel conv heads over the
/// shared fused trunk.
pub fn boundary_refine<T: Scalar>(
    g: &Graph<T>,
    video: &Tensor<T>,
    o_finest: &Var<T>,
    finest: LevelDims,
    w: &RefineVars<T>,
) -> Result<PredVars<T>> {
    let vd = video.dims();
    if vd.len() != 4 || vd[3] != 3 {
        return Err(Error::Shape {
            op: "boundary_refine",
            detail: format!("video must be [t,h,w,3], got {vd:?}"),
        });
    }
    let (t, h, wd_) = (vd[0], vd[1], vd[2]);
    let p = w.patch;
    if h % p != 0 || wd_ % p != 0 {
        return Err(Error::Config(format!(
            "input {h}x{wd_} is not divisible by patch size {p}"
        )));
    }
    let (gh, gw) = (h / p, wd_ / p);
    let n_tok = t * gh * gw;
    // non-overlapping patch extraction as a gather
    let mut idx = Vec::with_capacity(n_tok * p * p * 3);
    for ti in 0..t {
        for gy in 0..gh {
            for gx in 0..gw {
                for py in 0..p {
                    for px in 0..p {
                        for c in 0..3 {
                            idx.push(((ti * h + gy * p + py) * wd_ + gx * p + px) * 3 + c);
                        }
                    }
                }
            }
        }
    }
    let vid = g.constant(video.clone());
    let patches = g.permute_gather(&vid, Arc::new(idx), &[n_tok, p * p * 3])?;
    let mut tokens =
        g.add_row_broadcast(&g.matmul(&patches, &w.embed_w)?, &w.embed_b)?;
    let pe = g.constant(build_spatiotemporal_pe::<T>(t, gh, gw, w.dim)?);
    tokens = g.add(&tokens, &pe)?;
    for blk in &w.blocks {
        tokens = encoder_block(g, &tokens, blk)?;
    }
    // fuse at input resolution
    let tok_grid = tokens.reshape(&[t, gh, gw, w.dim])?;
    let tok_up = g.bilinear_resize(&tok_grid, h, wd_)?;
    let d = o_finest.dims()[1];
    let o_grid = o_finest.reshape(&[finest.t, finest.h, finest.w, d])?;
    let o_up = g.bilinear_resize(&o_grid, h, wd_)?;
    let rows = t * h * wd_;
    let fused_in = g.concat_cols(&[
        o_up.reshape(&[rows, d])?,
        tok_up.reshape(&[rows, w.dim])?,
    ])?;
    let fused = g.relu(&g.add_row_broadcast(&g.matmul(&fused_in, &w.fuse_w)?, &w.fuse_b)?)?;
    let cf = w.fuse_w.dims()[1];
    let trunk = fused.reshape(&[t, h, wd_, cf])?;
    let mask = g
        .conv2d(&trunk, &w.head_mask_w, Some(&w.head_mask_b), 1, 1)?
        .reshape(&[t, h, wd_])?;
    let bdry = g
        .conv2d(&trunk, &w.head_bdry_w, Some(&w.head_bdry_b), 1, 1)?
        .reshape(&[t, h, wd_])?;
    Ok(PredVars {
        mask,
        boundary: Some(bdry),
    })
}

/// Plain convolutional segmentation head over the comparator output: used
/// in the fully supervised path and in few-shot ablations without the
/// refinement module. Emits mask logits only.
#[derive(Clone, Debug)]
pub struct ConvHeadWeights<T> {
    pub conv1_w: Tensor<T>,
    pub conv1_b: Tensor<T>,
    pub conv2_w: Tensor<T>,
    pub conv2_b: Tensor<T>,
}

impl<T: Scalar> ConvHeadWeights<T> {
    pub fn init(d: usize, channels: usize, rng: &mut impl Rng) -> Self {
        ConvHeadWeights {
            conv1_w: Tensor::randn(&[3, 3, d, channels], (2.0 / (9.0 * d as f64)).sqrt(), rng),
            conv1_b: Tensor::zeros(&[channels]),
            conv2_w: Tensor::randn(
                &[3, 3, channels, 1],
                (1.0 / (9.0 * channels as f64)).sqrt(),
                rng,
            ),
            conv2_b: Tensor::zeros(&[1]),
        }
    }

    pub fn bind(&self, g: &Graph<T>, trainable: bool) -> ConvHeadVars<T> {
        let b = |t: &Tensor<T>| {
            if trainable {
                g.var(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        ConvHeadVars {
            conv1_w: b(&self.conv1_w),
            conv1_b: b(&self.conv1_b),
            conv2_w: b(&self.conv2_w),
            conv2_b: b(&self.conv2_b),
        }
    }
}

pub struct ConvHeadVars<T: Scalar> {
    pub conv1_w: Var<T>,
    pub conv1_b: Var<T>,
    pub conv2_w: Var<T>,
    pub conv2_b: Var<T>,
}

/// Applies the conv head at the finest decoded scale and upsamples logits
/// to the requested output resolution.
pub fn conv_head<T: Scalar>(
    g: &Graph<T>,
    o_finest: &Var<T>,
    finest: LevelDims,
    out_h: usize,
    out_w: usize,
    w: &ConvHeadVars<T>,
) -> Result<PredVars<T>> {
    let d = o_finest.dims()[1];
    let grid = o_finest.reshape(&[finest.t, finest.h, finest.w, d])?;
    let h1 = g.relu(&g.conv2d(&grid, &w.conv1_w, Some(&w.conv1_b), 1, 1)?)?;
    let logits = g.conv2d(&h1, &w.conv2_w, Some(&w.conv2_b), 1, 1)?;
    let up = g.bilinear_resize(&logits, out_h, out_w)?;
    Ok(PredVars {
        mask: up.reshape(&[finest.t, out_h, out_w])?,
        boundary: None,
    })
}

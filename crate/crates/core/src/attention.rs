//! Multihead attention, positional embeddings, and the transformer decoder
//! block with its token-dropping efficient variant.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::{s, su, Scalar};
use crate::tensor::{Graph, Tensor, Var};

/// Per-head query/key/value projections (stored merged, one `D×D` matrix
/// each, head h owning columns `h·D/N_h .. (h+1)·D/N_h`) plus the output
/// merge `W^o`.
#[derive(Clone, Debug)]
pub struct AttentionWeights<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub n_heads: usize,
}

impl<T: Scalar> AttentionWeights<T> {
    pub fn init(d: usize, n_heads: usize, std: f64, rng: &mut impl Rng) -> Result<Self> {
        check_heads(d, n_heads)?;
        Ok(AttentionWeights {
            wq: Tensor::randn(&[d, d], std, rng),
            wk: Tensor::randn(&[d, d], std, rng),
            wv: Tensor::randn(&[d, d], std, rng),
            wo: Tensor::randn(&[d, d], std, rng),
            n_heads,
        })
    }

    pub fn zeros(d: usize, n_heads: usize) -> Result<Self> {
        check_heads(d, n_heads)?;
        Ok(AttentionWeights {
            wq: Tensor::zeros(&[d, d]),
            wk: Tensor::zeros(&[d, d]),
            wv: Tensor::zeros(&[d, d]),
            wo: Tensor::zeros(&[d, d]),
            n_heads,
        })
    }

    pub fn d(&self) -> usize {
        self.wq.dims()[0]
    }

    pub fn bind(&self, g: &Graph<T>, trainable: bool) -> AttnVars<T> {
        AttnVars {
            wq: bind_one(g, &self.wq, trainable),
            wk: bind_one(g, &self.wk, trainable),
            wv: bind_one(g, &self.wv, trainable),
            wo: bind_one(g, &self.wo, trainable),
            n_heads: self.n_heads,
        }
    }
}

fn check_heads(d: usize, n_heads: usize) -> Result<()> {
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::Config(format!(
            "head count {n_heads} must divide channel width {d}"
        )));
    }
    Ok(())
}

fn bind_one<T: Scalar>(g: &Graph<T>, t: &Tensor<T>, trainable: bool) -> Var<T> {
    if trainable {
        g.var(t.clone())
    } else {
        g.constant(t.clone())
    }
}

/// Graph-bound attention weights.
#[derive(Clone)]
pub struct AttnVars<T: Scalar> {
    pub wq: Var<T>,
    pub wk: Var<T>,
    pub wv: Var<T>,
    pub wo: Var<T>,
    pub n_heads: usize,
}

/// Multihead attention: per head `softmax(Q_h K_hᵀ / √D) V_h`, heads
/// concatenated and merged by `W^o`.
pub fn multihead_attention<T: Scalar>(
    g: &Graph<T>,
    q: &Var<T>,
    k: &Var<T>,
    v: &Var<T>,
    w: &AttnVars<T>,
) -> Result<Var<T>> {
    multihead_attention_capture(g, q, k, v, w, None)
}

/// As [`multihead_attention`], optionally pushing each head's attention
/// probabilities (rows: queries, cols: keys) into `capture`.
pub fn multihead_attention_capture<T: Scalar>(
    g: &Graph<T>,
    q: &Var<T>,
    k: &Var<T>,
    v: &Var<T>,
    w: &AttnVars<T>,
    mut capture: Option<&mut Vec<Tensor<T>>>,
) -> Result<Var<T>> {
    let d = w.wq.dims()[0];
    check_heads(d, w.n_heads)?;
    if q.dims().len() != 2 || q.dims()[1] != d {
        return Err(Error::Shape {
            op: "multihead_attention",
            detail: format!("query {:?} vs channel width {d}", q.dims()),
        });
    }
    if k.dims() != v.dims() || k.dims().len() != 2 || k.dims()[1] != d {
        return Err(Error::Shape {
            op: "multihead_attention",
            detail: format!("key {:?} vs value {:?} (width {d})", k.dims(), v.dims()),
        });
    }
    let dh = d / w.n_heads;
    // scores are scaled by 1/sqrt(D), not 1/sqrt(D/N_h)
    let inv_sqrt_d = T::one() / su::<T>(d).sqrt();
    let qp = g.matmul(q, &w.wq)?;
    let kp = g.matmul(k, &w.wk)?;
    let vp = g.matmul(v, &w.wv)?;
    let mut heads = Vec::with_capacity(w.n_heads);
    for h in 0..w.n_heads {
        let (c0, c1) = (h * dh, (h + 1) * dh);
        let qh = g.select_cols(&qp, c0, c1)?;
        let kh = g.select_cols(&kp, c0, c1)?;
        let vh = g.select_cols(&vp, c0, c1)?;
        let scores = g.scale(&g.matmul_nt(&qh, &kh)?, inv_sqrt_d)?;
        let probs = g.softmax_rows(&scores)?;
        if let Some(cap) = capture.as_deref_mut() {
            cap.push(probs.value.clone());
        }
        heads.push(g.matmul(&probs, &vh)?);
    }
    let merged = g.concat_cols(&heads)?;
    g.matmul(&merged, &w.wo)
}

/// Deterministic sinusoidal embedding over (t, y, x): channels are split
/// evenly among the three axes (y/x rounded down to an even count, the
/// remainder assigned to the temporal axis), each axis using interleaved
/// sin/cos pairs. Rows follow the (t, y, x) row-major token order.
pub fn build_spatiotemporal_pe<T: Scalar>(
    t: usize,
    h: usize,
    w: usize,
    d: usize,
) -> Result<Tensor<T>> {
    if d < 6 || d % 2 != 0 {
        return Err(Error::Config(format!(
            "spatiotemporal embedding width {d} must be even and >= 6"
        )));
    }
    let mut d_spatial = d / 3;
    if d_spatial % 2 == 1 {
        d_spatial -= 1;
    }
    let d_t = d - 2 * d_spatial;
    let rows = t * h * w;
    let mut data = Vec::with_capacity(rows * d);
    let base = 10000.0f64;
    let axis = |pos: usize, d_ax: usize, out: &mut Vec<T>| {
        for i in 0..d_ax / 2 {
            let freq = base.powf(-2.0 * i as f64 / d_ax as f64);
            let angle = pos as f64 * freq;
            out.push(s::<T>(angle.sin()));
            out.push(s::<T>(angle.cos()));
        }
    };
    for ti in 0..t {
        for y in 0..h {
            for x in 0..w {
                axis(ti, d_t, &mut data);
                axis(y, d_spatial, &mut data);
                axis(x, d_spatial, &mut data);
            }
        }
    }
    Tensor::new(&[rows, d], data)
}

/// Learnable scale/offset for per-row normalization.
#[derive(Clone, Debug)]
pub struct LayerNormWeights<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> LayerNormWeights<T> {
    pub fn identity(d: usize) -> Self {
        LayerNormWeights {
            gamma: Tensor::filled(&[d], T::one()),
            beta: Tensor::zeros(&[d]),
        }
    }

    pub fn bind(&self, g: &Graph<T>, trainable: bool) -> LnVars<T> {
        LnVars {
            gamma: bind_one(g, &self.gamma, trainable),
            beta: bind_one(g, &self.beta, trainable),
        }
    }
}

#[derive(Clone)]
pub struct LnVars<T: Scalar> {
    pub gamma: Var<T>,
    pub beta: Var<T>,
}

/// One decoder layer: optional pre-norm self-attention (with token
/// dropping), pre-norm cross-attention, pre-norm feed-forward (D→4D→D),
/// each on a residual path.
#[derive(Clone, Debug)]
pub struct DecoderBlockWeights<T> {
    pub self_attn: Option<(AttentionWeights<T>, LayerNormWeights<T>)>,
    pub cross_attn: AttentionWeights<T>,
    pub ln_cross: LayerNormWeights<T>,
    pub ffn_w1: Tensor<T>,
    pub ffn_b1: Tensor<T>,
    pub ffn_w2: Tensor<T>,
    pub ffn_b2: Tensor<T>,
    pub ln_ffn: LayerNormWeights<T>,
}

impl<T: Scalar> DecoderBlockWeights<T> {
    pub fn init(
        d: usize,
        n_heads: usize,
        with_self_attention: bool,
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let self_attn = if with_self_attention {
            Some((
                AttentionWeights::init(d, n_heads, std, rng)?,
                LayerNormWeights::identity(d),
            ))
        } else {
            None
        };
        Ok(DecoderBlockWeights {
            self_attn,
            cross_attn: AttentionWeights::init(d, n_heads, std, rng)?,
            ln_cross: LayerNormWeights::identity(d),
            ffn_w1: Tensor::randn(&[d, 4 * d], std, rng),
            ffn_b1: Tensor::zeros(&[4 * d]),
            ffn_w2: Tensor::randn(&[4 * d, d], std, rng),
            ffn_b2: Tensor::zeros(&[d]),
            ln_ffn: LayerNormWeights::identity(d),
        })
    }

    pub fn zeros(d: usize, n_heads: usize, with_self_attention: bool) -> Result<Self> {
        let self_attn = if with_self_attention {
            Some((
                AttentionWeights::zeros(d, n_heads)?,
                LayerNormWeights::identity(d),
            ))
        } else {
            None
        };
        Ok(DecoderBlockWeights {
            self_attn,
            cross_attn: AttentionWeights::zeros(d, n_heads)?,
            ln_cross: LayerNormWeights::identity(d),
            ffn_w1: Tensor::zeros(&[d, 4 * d]),
            ffn_b1: Tensor::zeros(&[4 * d]),
            ffn_w2: Tensor::zeros(&[4 * d, d]),
            ffn_b2: Tensor::zeros(&[d]),
            ln_ffn: LayerNormWeights::identity(d),
        })
    }

    pub fn bind(&self, g: &Graph<T>, trainable: bool) -> BlockVars<T> {
        BlockVars {
            self_attn: self
                .self_attn
                .as_ref()
                .map(|(a, n)| (a.bind(g, trainable), n.bind(g, trainable))),
            cross_attn: self.cross_attn.bind(g, trainable),
            ln_cross: self.ln_cross.bind(g, trainable),
            ffn_w1: bind_one(g, &self.ffn_w1, trainable),
            ffn_b1: bind_one(g, &self.ffn_b1, trainable),
            ffn_w2: bind_one(g, &self.ffn_w2, trainable),
            ffn_b2: bind_one(g, &self.ffn_b2, trainable),
            ln_ffn: self.ln_ffn.bind(g, trainable),
        }
    }
}

#[derive(Clone)]
pub struct BlockVars<T: Scalar> {
    pub self_attn: Option<(AttnVars<T>, LnVars<T>)>,
    pub cross_attn: AttnVars<T>,
    pub ln_cross: LnVars<T>,
    pub ffn_w1: Var<T>,
    pub ffn_b1: Var<T>,
    pub ffn_w2: Var<T>,
    pub ffn_b2: Var<T>,
    pub ln_ffn: LnVars<T>,
}

/// Accounting for one block application.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BlockStats {
    /// Tokens that entered self-attention.
    pub self_tokens: usize,
    /// Self-attention matrix elements (`self_tokens²`).
    pub self_matrix_elements: usize,
    /// Cross-attention matrix elements (`tokens × memory entries`).
    pub cross_elements: usize,
}

/// Uniformly sampled token subset for the efficient self-attention variant:
/// keeps `⌈(1-ρ)·n⌉` of `n` tokens. `ρ = 0` keeps the unmodified path.
pub fn plan_token_drop(
    n_tokens: usize,
    drop_ratio: f64,
    rng: &mut impl Rng,
) -> Result<Option<Arc<Vec<usize>>>> {
    if !(0.0..1.0).contains(&drop_ratio) {
        return Err(Error::Config(format!(
            "drop ratio {drop_ratio} must lie in [0, 1)"
        )));
    }
    if drop_ratio == 0.0 {
        return Ok(None);
    }
    let keep = kept_tokens(n_tokens, drop_ratio);
    // Floyd's sampling, ascending order for a stable row layout
    let mut chosen = alloc::collections::BTreeSet::new();
    for j in (n_tokens - keep)..n_tokens {
        let t = rng.gen_range(0..=j);
        if !chosen.insert(t) {
            chosen.insert(j);
        }
    }
    Ok(Some(Arc::new(chosen.into_iter().collect())))
}

/// Number of tokens kept under a drop ratio, for analytic accounting:
/// `⌈(1-ρ)·n⌉` evaluated in real arithmetic (an epsilon guard keeps exact
/// products like 0.3·100 from ceiling up through rounding noise).
pub fn kept_tokens(n_tokens: usize, drop_ratio: f64) -> usize {
    if drop_ratio == 0.0 {
        n_tokens
    } else {
        let x = (1.0 - drop_ratio) * n_tokens as f64;
        ((x - 1e-9).ceil() as usize).clamp(1, n_tokens)
    }
}

/// Applies one decoder layer.
///
/// `query_pe`, when given, is added to the normalized tokens used as
/// cross-attention queries (keys/values arrive ready-made in `mem_k` /
/// `mem_v`). `drop`, when given, restricts self-attention to the listed
/// token rows; untouched rows bypass it and rejoin before cross-attention.
#[allow(clippy::too_many_arguments)]
pub fn decoder_block<T: Scalar>(
    g: &Graph<T>,
    x: &Var<T>,
    mem_k: &Var<T>,
    mem_v: &Var<T>,
    w: &BlockVars<T>,
    query_pe: Option<&Var<T>>,
    drop: Option<&Arc<Vec<usize>>>,
    capture: Option<&mut Vec<Tensor<T>>>,
) -> Result<(Var<T>, BlockStats)> {
    let a = x.dims()[0];
    let b = mem_k.dims()[0];
    let mut stats = BlockStats::default();
    let mut cur = x.clone();
    if let Some((attn, ln)) = &w.self_attn {
        match drop {
            Some(idx) if idx.len() < a => {
                let rows: Vec<usize> = idx.as_ref().clone();
                let xs = g.gather_rows(&cur, &rows)?;
                let n = g.layer_norm_rows(&xs, &ln.gamma, &ln.beta)?;
                let att = multihead_attention(g, &n, &n, &n, attn)?;
                let ys = g.add(&xs, &att)?;
                cur = g.row_splice(&cur, &ys, Arc::clone(idx))?;
                stats.self_tokens = rows.len();
            }
            _ => {
                let n = g.layer_norm_rows(&cur, &ln.gamma, &ln.beta)?;
                let att = multihead_attention(g, &n, &n, &n, attn)?;
                cur = g.add(&cur, &att)?;
                stats.self_tokens = a;
            }
        }
        stats.self_matrix_elements = stats.self_tokens * stats.self_tokens;
    }
    let n = g.layer_norm_rows(&cur, &w.ln_cross.gamma, &w.ln_cross.beta)?;
    let q = match query_pe {
        Some(pe) => g.add(&n, pe)?,
        None => n,
    };
    let att = multihead_attention_capture(g, &q, mem_k, mem_v, &w.cross_attn, capture)?;
    cur = g.add(&cur, &att)?;
    stats.cross_elements = a * b;
    let n = g.layer_norm_rows(&cur, &w.ln_ffn.gamma, &w.ln_ffn.beta)?;
    let h1 = g.relu(&g.add_row_broadcast(&g.matmul(&n, &w.ffn_w1)?, &w.ffn_b1)?)?;
    let h2 = g.add_row_broadcast(&g.matmul(&h1, &w.ffn_w2)?, &w.ffn_b2)?;
    cur = g.add(&cur, &h2)?;
    Ok((cur, stats))
}

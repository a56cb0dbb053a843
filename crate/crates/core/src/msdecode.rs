//! Multiscale memory decoding: cross-attention from feature tokens to a
//! shared learnable memory, residual bilinear mixing between scales, and the
//! stacked (coarse-to-fine) vs. multigrid (bidirectional) visit schedules.
//! Also carries the compressed-query decoding baseline it is compared
//! against.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::attention::{
    decoder_block, multihead_attention, plan_token_drop, AttnVars, BlockStats, BlockVars,
    DecoderBlockWeights,
};
use crate::error::{Error, Result};
use crate::scalar::{su, Scalar};
use crate::tensor::{Graph, Tensor, Var};

/// Learnable memory entries and their positional embeddings, shared across
/// all decoding layers and scales.
#[derive(Clone, Debug)]
pub struct MemoryBank<T> {
    pub entries: Tensor<T>,
    pub pos: Tensor<T>,
}

impl<T: Scalar> MemoryBank<T> {
    pub fn init(n: usize, d: usize, rng: &mut impl Rng) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("memory bank needs at least one entry".into()));
        }
        Ok(MemoryBank {
            entries: Tensor::randn(&[n, d], 0.02, rng),
            pos: Tensor::randn(&[n, d], 0.02, rng),
        })
    }

    pub fn n(&self) -> usize {
        self.entries.dims()[0]
    }

    pub fn bind(&self, g: &Graph<T>, trainable: bool) -> BankVars<T> {
        let b = |t: &Tensor<T>| {
            if trainable {
                g.var(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        BankVars {
            entries: b(&self.entries),
            pos: b(&self.pos),
        }
    }
}

/// Compressed learnable queries for the decoding baseline.
pub type QueryBank<T> = MemoryBank<T>;

#[derive(Clone)]
pub struct BankVars<T: Scalar> {
    pub entries: Var<T>,
    pub pos: Var<T>,
}

/// Spatiotemporal extents of one pyramid level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelDims {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl LevelDims {
    pub fn tokens(&self) -> usize {
        self.t * self.h * self.w
    }
}

/// Per-level token maps (level 0 in the vec = level 1 = coarsest).
pub struct FeaturePyramid<T: Scalar> {
    pub levels: Vec<(LevelDims, Var<T>)>,
}

impl<T: Scalar> FeaturePyramid<T> {
    pub fn level_count(&self) -> usize {
        self.levels.len()
    }
}

/// Fixed spatiotemporal embeddings plus learnable per-level scale
/// embeddings, bound to a graph.
pub struct PositionalVars<T: Scalar> {
    /// `[tokens × D]` constant per level.
    pub st: Vec<Var<T>>,
    /// `[D]` learnable per level, broadcast over tokens.
    pub sc: Vec<Var<T>>,
}

impl<T: Scalar> PositionalVars<T> {
    /// Combined query embedding for one level: `P_st + P_sc` broadcast.
    pub fn query_pe(&self, g: &Graph<T>, level_idx: usize) -> Result<Var<T>> {
        g.add_row_broadcast(&self.st[level_idx], &self.sc[level_idx])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Stacked,
    Multigrid,
}

/// Visit-order schedule over pyramid levels (1 = coarsest, L = finest).
#[derive(Clone, Copy, Debug)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub levels: usize,
    /// Decoder iterations per level for the stacked schedule.
    pub iterations: usize,
}

impl ScheduleConfig {
    pub fn new(kind: ScheduleKind, levels: usize, iterations: usize) -> Result<Self> {
        if levels == 0 || iterations == 0 {
            return Err(Error::Config(format!(
                "schedule needs levels >= 1 and iterations >= 1, got L={levels}, N_d={iterations}"
            )));
        }
        Ok(ScheduleConfig {
            kind,
            levels,
            iterations,
        })
    }

    /// The level sequence the decoder walks. Stacked: `[1..L]` repeated
    /// `N_d` times. Multigrid: down-up-down in level index,
    /// `[1..L] + [L-1..1] + [2..L]`, which is `[1,2,3,2,1,2,3]` at L = 3.
    pub fn visit_order(&self) -> Vec<usize> {
        let l = self.levels;
        match self.kind {
            ScheduleKind::Stacked => {
                let mut order = Vec::with_capacity(l * self.iterations);
                for _ in 0..self.iterations {
                    order.extend(1..=l);
                }
                order
            }
            ScheduleKind::Multigrid => {
                let mut order: Vec<usize> = (1..=l).collect();
                order.extend((1..l).rev());
                order.extend(2..=l);
                order
            }
        }
    }

    pub fn layer_count(&self) -> usize {
        self.visit_order().len()
    }
}

/// Cross attention from feature tokens to the memory: queries are the
/// tokens with scale and spatiotemporal embeddings added, keys are memory
/// entries plus their positional embeddings, values are the raw entries.
/// Token count is preserved.
pub fn memory_cross_attend<T: Scalar>(
    g: &Graph<T>,
    x: &Var<T>,
    bank: &BankVars<T>,
    pe_st: &Var<T>,
    pe_sc: &Var<T>,
    w: &AttnVars<T>,
) -> Result<Var<T>> {
    if x.dims() != pe_st.dims() {
        return Err(Error::Shape {
            op: "memory_cross_attend",
            detail: format!(
                "tokens {:?} vs spatiotemporal embedding {:?}",
                x.dims(),
                pe_st.dims()
            ),
        });
    }
    let q = g.add_row_broadcast(&g.add(x, pe_st)?, pe_sc)?;
    let k = g.add(&bank.entries, &bank.pos)?;
    multihead_attention(g, &q, &k, &bank.entries, w)
}

/// Compressed-query decoding for one level: learnable queries attend to the
/// feature tokens; the output has N rows regardless of token count.
pub fn query_decode_level<T: Scalar>(
    g: &Graph<T>,
    bank: &BankVars<T>,
    x: &Var<T>,
    pe_st: &Var<T>,
    pe_sc: &Var<T>,
    w: &AttnVars<T>,
) -> Result<Var<T>> {
    if x.dims() != pe_st.dims() {
        return Err(Error::Shape {
            op: "query_decode_level",
            detail: format!(
                "tokens {:?} vs spatiotemporal embedding {:?}",
                x.dims(),
                pe_st.dims()
            ),
        });
    }
    let q = g.add(&bank.entries, &bank.pos)?;
    let k = g.add_row_broadcast(&g.add(x, pe_st)?, pe_sc)?;
    multihead_attention(g, &q, &k, x, w)
}

/// Residual transfer of a decoded output into another level's state:
/// `o_source` is reshaped to its spatial grid, bilinearly resized to the
/// target extents, flattened and added. Same-level mixing reduces to a
/// plain residual add.
pub fn mix<T: Scalar>(
    g: &Graph<T>,
    target: &Var<T>,
    target_dims: LevelDims,
    source: &Var<T>,
    source_dims: LevelDims,
) -> Result<Var<T>> {
    let d = target.dims()[1];
    if source.dims()[1] != d || source_dims.t != target_dims.t {
        return Err(Error::Shape {
            op: "mix",
            detail: format!(
                "target {:?}@{:?} vs source {:?}@{:?}",
                target.dims(),
                target_dims,
                source.dims(),
                source_dims
            ),
        });
    }
    let grid = source.reshape(&[source_dims.t, source_dims.h, source_dims.w, d])?;
    let resized = g.bilinear_resize(&grid, target_dims.h, target_dims.w)?;
    let flat = resized.reshape(&[target_dims.tokens(), d])?;
    g.add(target, &flat)
}

/// Everything a schedule run produces.
#[derive(Debug)]
pub struct RunOutput<T: Scalar> {
    /// Final decoded features at the finest level, `[T·H_L·W_L × D]`.
    pub output: Var<T>,
    /// Level index (1-based) of every applied layer.
    pub trace: Vec<usize>,
    /// Per-visit attention accounting.
    pub stats: Vec<BlockStats>,
    /// Mean-over-heads cross-attention probabilities of the final visit,
    /// `[tokens × N]`, when capture was requested.
    pub attention: Option<Tensor<T>>,
}

/// Options controlling a schedule run.
#[derive(Clone, Copy)]
pub struct RunOptions {
    /// Token-drop ratio applied to self-attention at the finest level.
    pub drop_ratio: f64,
    /// Seed for the per-visit drop subsets.
    pub drop_seed: u64,
    /// Capture the final visit's cross-attention map.
    pub capture_attention: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            drop_ratio: 0.0,
            drop_seed: 0,
            capture_attention: false,
        }
    }
}

/// Walks the visit schedule over the pyramid with one decoder layer per
/// visit. Each visit reads the current state of its level and mixes the
/// layer output into the next visited level's state; the final visit's
/// output is returned directly.
pub fn run_schedule<T: Scalar>(
    g: &Graph<T>,
    pyramid: &FeaturePyramid<T>,
    bank: &BankVars<T>,
    pos: &PositionalVars<T>,
    layers: &[BlockVars<T>],
    cfg: &ScheduleConfig,
    opts: &RunOptions,
) -> Result<RunOutput<T>> {
    let l = cfg.levels;
    if pyramid.level_count() != l {
        return Err(Error::Config(format!(
            "pyramid has {} levels, schedule expects {l}",
            pyramid.level_count()
        )));
    }
    let order = cfg.visit_order();
    if layers.len() != order.len() {
        return Err(Error::Config(format!(
            "schedule needs {} layer weight sets, got {}",
            order.len(),
            layers.len()
        )));
    }
    if pos.st.len() != l || pos.sc.len() != l {
        return Err(Error::Config(format!(
            "positional set covers {} levels, schedule expects {l}",
            pos.st.len()
        )));
    }
    let mem_k = g.add(&bank.entries, &bank.pos)?;
    // per-level query embeddings, built once
    let mut pes: Vec<Var<T>> = Vec::with_capacity(l);
    for idx in 0..l {
        pes.push(pos.query_pe(g, idx)?);
    }
    let mut states: Vec<(LevelDims, Var<T>)> = pyramid.levels.clone();
    let mut trace = Vec::with_capacity(order.len());
    let mut stats = Vec::with_capacity(order.len());
    let mut attention = None;
    let mut drop_rng = crate::rng::stream(opts.drop_seed, "token-drop", 0);
    let mut output = None;
    for (visit, &level) in order.iter().enumerate() {
        let idx = level - 1;
        let (dims, state) = states[idx].clone();
        let drop_plan = if level == l && opts.drop_ratio > 0.0 {
            plan_token_drop(dims.tokens(), opts.drop_ratio, &mut drop_rng)?
        } else {
            None
        };
        let last = visit + 1 == order.len();
        let mut captured: Vec<Tensor<T>> = Vec::new();
        let capture = if last && opts.capture_attention {
            Some(&mut captured)
        } else {
            None
        };
        let (out, st) = decoder_block(
            g,
            &state,
            &mem_k,
            &bank.entries,
            &layers[visit],
            Some(&pes[idx]),
            drop_plan.as_ref(),
            capture,
        )?;
        trace.push(level);
        stats.push(st);
        if last {
            if opts.capture_attention {
                attention = Some(mean_over_heads(&captured)?);
            }
            output = Some(out);
        } else {
            let next = order[visit + 1] - 1;
            let (ndims, nstate) = states[next].clone();
            let mixed = mix(g, &nstate, ndims, &out, dims)?;
            states[next] = (ndims, mixed);
        }
    }
    Ok(RunOutput {
        output: output.expect("non-empty visit order"),
        trace,
        stats,
        attention,
    })
}

/// The full comparator: runs the schedule and returns the finest-level
/// decoded features.
pub fn run_comparator<T: Scalar>(
    g: &Graph<T>,
    pyramid: &FeaturePyramid<T>,
    bank: &BankVars<T>,
    pos: &PositionalVars<T>,
    layers: &[BlockVars<T>],
    cfg: &ScheduleConfig,
    opts: &RunOptions,
) -> Result<Var<T>> {
    Ok(run_schedule(g, pyramid, bank, pos, layers, cfg, opts)?.output)
}

fn mean_over_heads<T: Scalar>(heads: &[Tensor<T>]) -> Result<Tensor<T>> {
    if heads.is_empty() {
        return Err(Error::Eval("no attention maps captured".into()));
    }
    let dims = heads[0].dims().to_vec();
    let n = heads[0].len();
    let scale = T::one() / su::<T>(heads.len());
    let mut acc = alloc::vec![T::zero(); n];
    for h in heads {
        for (a, v) in acc.iter_mut().zip(h.data()) {
            *a = *a + *v;
        }
    }
    for a in acc.iter_mut() {
        *a = *a * scale;
    }
    Tensor::new(&dims, acc)
}

/// Weights for the compressed-query baseline decoder: one block per visit
/// (operating on the N query tokens) plus a final readout attention that
/// projects the refined queries back onto the finest token grid.
#[derive(Clone, Debug)]
pub struct QueryDecoderWeights<T> {
    pub layers: Vec<DecoderBlockWeights<T>>,
    pub readout: crate::attention::AttentionWeights<T>,
}

/// Query-decoding schedule: the learnable queries are refined against each
/// visited level (information crosses scales only through the N-token
/// state), then read out at the finest level.
#[allow(clippy::too_many_arguments)]
pub fn run_query_schedule<T: Scalar>(
    g: &Graph<T>,
    pyramid: &FeaturePyramid<T>,
    bank: &BankVars<T>,
    pos: &PositionalVars<T>,
    layers: &[BlockVars<T>],
    readout: &AttnVars<T>,
    cfg: &ScheduleConfig,
) -> Result<RunOutput<T>> {
    let l = cfg.levels;
    if pyramid.level_count() != l {
        return Err(Error::Config(format!(
            "pyramid has {} levels, schedule expects {l}",
            pyramid.level_count()
        )));
    }
    let order = cfg.visit_order();
    if layers.len() != order.len() {
        return Err(Error::Config(format!(
            "schedule needs {} layer weight sets, got {}",
            order.len(),
            layers.len()
        )));
    }
    let mut pes: Vec<Var<T>> = Vec::with_capacity(l);
    for idx in 0..l {
        pes.push(pos.query_pe(g, idx)?);
    }
    let mut queries = bank.entries.clone();
    let mut trace = Vec::with_capacity(order.len());
    let mut stats = Vec::with_capacity(order.len());
    for (visit, &level) in order.iter().enumerate() {
        let idx = level - 1;
        let (_, tokens) = &pyramid.levels[idx];
        let keys = g.add(tokens, &pes[idx])?;
        let (out, st) = decoder_block(
            g,
            &queries,
            &keys,
            tokens,
            &layers[visit],
            Some(&bank.pos),
            None,
            None,
        )?;
        queries = out;
        trace.push(level);
        stats.push(st);
    }
    // readout: finest tokens attend to the refined compressed queries
    let (fdims, finest) = &pyramid.levels[l - 1];
    let q = g.add(finest, &pes[l - 1])?;
    let output = multihead_attention(g, &q, &queries, &queries, readout)?;
    debug_assert_eq!(output.dims()[0], fdims.tokens());
    Ok(RunOutput {
        output,
        trace,
        stats,
        attention: None,
    })
}

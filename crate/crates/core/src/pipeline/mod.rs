//! End-to-end few-shot and automatic video object segmentation paths:
//! frozen backbone, masked support features, hypercorrelation and squeeze,
//! multiscale memory (or query) decoding, refinement/segmentation heads,
//! losses, the optimizer loop, and multiscale inference postprocessing.

pub mod backbone;
pub mod correlate;
pub mod kshot;
pub mod loss;
pub mod optim;
pub mod refine;
pub mod squeeze;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::attention::{
    build_spatiotemporal_pe, AttentionWeights, AttnVars, DecoderBlockWeights,
    LayerNormWeights, LnVars,
};
use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::msdecode::{
    run_query_schedule, run_schedule, BankVars, FeaturePyramid, LevelDims, MemoryBank,
    PositionalVars, RunOptions, RunOutput, ScheduleConfig, ScheduleKind,
};
use crate::scalar::{su, Scalar};
use crate::tensor::{bilinear_resize_kernel, Graph, Tensor, Var};

pub use backbone::{Backbone, ReduceConv, ReduceVars};
pub use correlate::{hypercorrelation, mask_support, resize_mask_soft, CorrLevel, CorrelationPyramid};
pub use kshot::{adaptive_combine, kshot_weights, normalized, prediction_probs, CombinedPrediction};
pub use loss::{compute_loss, LossMode};
pub use optim::{AdamW, AdamWConfig};
pub use refine::{
    boundary_refine, conv_head, ConvHeadWeights, ConvHeadVars, PredVars, Prediction,
    RefineWeights, RefineVars,
};
pub use squeeze::{squeeze_level, squeeze_pyramid, SqueezeVars, SqueezeWeights};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Fsvos,
    Avos,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decoding {
    Memory,
    Query,
}

/// Everything needed to construct a model deterministically.
#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub mode: Mode,
    pub decoding: Decoding,
    pub schedule: ScheduleKind,
    pub levels: usize,
    pub d: usize,
    pub n_mem: usize,
    pub n_heads: usize,
    pub n_dec: usize,
    pub input_h: usize,
    pub input_w: usize,
    pub drop_ratio: f64,
    pub self_attention: bool,
    pub refine: bool,
    pub patch: usize,
    pub refine_dim: usize,
    pub refine_layers: usize,
    pub head_channels: usize,
    pub squeeze_groups: usize,
    /// Per-level backbone channel widths, coarsest first.
    pub backbone_widths: Vec<usize>,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale few-shot defaults: the paper's small-model settings
    /// scaled down (L = 3, D = 32, N = 20, N_h = 4, N_d = 3, 64×64 input).
    pub fn fsvos_desk(seed: u64) -> Self {
        ModelConfig {
            mode: Mode::Fsvos,
            decoding: Decoding::Memory,
            schedule: ScheduleKind::Multigrid,
            levels: 3,
            d: 32,
            n_mem: 20,
            n_heads: 4,
            n_dec: 3,
            input_h: 64,
            input_w: 64,
            drop_ratio: 0.0,
            self_attention: true,
            refine: true,
            patch: 8,
            refine_dim: 32,
            refine_layers: 2,
            head_channels: 16,
            squeeze_groups: 1,
            backbone_widths: vec![128, 64, 32],
            seed,
        }
    }

    /// Fully supervised defaults: N = 6 memory entries, conv head only.
    pub fn avos_desk(seed: u64) -> Self {
        ModelConfig {
            mode: Mode::Avos,
            decoding: Decoding::Memory,
            schedule: ScheduleKind::Stacked,
            n_mem: 6,
            refine: false,
            ..ModelConfig::fsvos_desk(seed)
        }
    }

    /// Tiny double-precision verification config: L = 3, D = 8, N = 4,
    /// N_h = 2, finest level 8×8 (16×16 input).
    pub fn tiny(seed: u64) -> Self {
        ModelConfig {
            levels: 3,
            d: 8,
            n_mem: 4,
            n_heads: 2,
            n_dec: 3,
            input_h: 16,
            input_w: 16,
            refine_dim: 8,
            refine_layers: 1,
            head_channels: 4,
            backbone_widths: vec![16, 8, 4],
            ..ModelConfig::fsvos_desk(seed)
        }
    }

    pub fn schedule_config(&self) -> Result<ScheduleConfig> {
        ScheduleConfig::new(self.schedule, self.levels, self.n_dec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d % self.n_heads != 0 || self.n_heads == 0 {
            return Err(Error::Config(format!(
                "head count {} must divide width {}",
                self.n_heads, self.d
            )));
        }
        if self.d < 6 || self.d % 2 != 0 {
            return Err(Error::Config(format!(
                "decoder width {} must be even and >= 6 for the positional split",
                self.d
            )));
        }
        if self.backbone_widths.len() != self.levels {
            return Err(Error::Config(format!(
                "backbone widths {:?} must cover {} levels",
                self.backbone_widths, self.levels
            )));
        }
        let div = 1usize << (self.levels + 1);
        if self.input_h % div != 0 || self.input_w % div != 0 {
            return Err(Error::Config(format!(
                "input {}x{} must be divisible by 2^(L+1) = {div}",
                self.input_h, self.input_w
            )));
        }
        if self.mode == Mode::Fsvos
            && self.refine
            && (self.input_h % self.patch != 0 || self.input_w % self.patch != 0)
        {
            return Err(Error::Config(format!(
                "input {}x{} must be divisible by patch size {}",
                self.input_h, self.input_w, self.patch
            )));
        }
        if !(0.0..1.0).contains(&self.drop_ratio) {
            return Err(Error::Config(format!(
                "drop ratio {} must lie in [0, 1)",
                self.drop_ratio
            )));
        }
        if self.n_mem == 0 {
            return Err(Error::Config("memory bank needs at least one entry".into()));
        }
        Ok(())
    }

    /// Query token counts per level for a clip of length `t`.
    pub fn level_token_counts(&self, t: usize) -> Vec<usize> {
        (1..=self.levels)
            .map(|lvl| {
                let f = 1usize << (self.levels + 1 - lvl);
                t * (self.input_h / f) * (self.input_w / f)
            })
            .collect()
    }
}

/// The trainable model plus its frozen components.
pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub backbone: Backbone<T>,
    pub squeeze: Vec<SqueezeWeights<T>>,
    pub reduce: Vec<ReduceConv<T>>,
    pub bank: MemoryBank<T>,
    pub scale_embed: Vec<Tensor<T>>,
    pub layers: Vec<DecoderBlockWeights<T>>,
    pub query_readout: Option<AttentionWeights<T>>,
    pub refine: Option<RefineWeights<T>>,
    pub head: Option<ConvHeadWeights<T>>,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.seed;
        let backbone = Backbone::init(&cfg.backbone_widths, crate::rng::derive_seed(seed, "backbone", 0))?;
        let mut rng = crate::rng::stream(seed, "model-init", 0);
        let squeeze = if cfg.mode == Mode::Fsvos {
            (0..cfg.levels)
                .map(|_| SqueezeWeights::init(3, cfg.squeeze_groups, cfg.d, &mut rng))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let reduce = if cfg.mode == Mode::Avos {
            cfg.backbone_widths
                .iter()
                .map(|&c| ReduceConv::init(c, cfg.d, &mut rng))
                .collect()
        } else {
            Vec::new()
        };
        let bank = MemoryBank::init(cfg.n_mem, cfg.d, &mut rng)?;
        let scale_embed = (0..cfg.levels)
            .map(|_| Tensor::randn(&[cfg.d], 0.02, &mut rng))
            .collect();
        let n_layers = cfg.schedule_config()?.layer_count();
        let layers = (0..n_layers)
            .map(|_| {
                DecoderBlockWeights::init(cfg.d, cfg.n_heads, self_attention_in_layers(&cfg), 0.05, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let query_readout = if cfg.decoding == Decoding::Query {
            Some(AttentionWeights::init(cfg.d, cfg.n_heads, 0.05, &mut rng)?)
        } else {
            None
        };
        let refine = if cfg.mode == Mode::Fsvos && cfg.refine {
            Some(RefineWeights::init(
                cfg.patch,
                cfg.refine_dim,
                cfg.refine_layers,
                cfg.n_heads.min(cfg.refine_dim),
                cfg.d,
                cfg.head_channels,
                &mut rng,
            )?)
        } else {
            None
        };
        let head = if refine.is_none() {
            Some(ConvHeadWeights::init(cfg.d, cfg.head_channels, &mut rng))
        } else {
            None
        };
        Ok(Model {
            cfg,
            backbone,
            squeeze,
            reduce,
            bank,
            scale_embed,
            layers,
            query_readout,
            refine,
            head,
        })
    }

    /// Binds every weight into the graph; trainable tensors become tracked
    /// vars registered by name, frozen ones become constants.
    pub fn bind(&self, g: &Graph<T>) -> BoundModel<T> {
        self.bind_with_overrides(g, &BTreeMap::new())
    }

    /// As [`Model::bind`], but names present in `overrides` use the
    /// supplied vars instead (the gradient checker injects perturbed
    /// parameters this way).
    pub fn bind_with_overrides(
        &self,
        g: &Graph<T>,
        overrides: &BTreeMap<String, Var<T>>,
    ) -> BoundModel<T> {
        let mut registry: Vec<(String, Var<T>)> = Vec::new();
        let mut b = |name: String, t: &Tensor<T>| -> Var<T> {
            let v = match overrides.get(&name) {
                Some(ov) => ov.clone(),
                None => g.var(t.clone()),
            };
            registry.push((name, v.clone()));
            v
        };
        let squeeze = self
            .squeeze
            .iter()
            .enumerate()
            .map(|(i, w)| bind_squeeze(w, &format!("squeeze.{i}"), &mut b))
            .collect();
        let reduce = self
            .reduce
            .iter()
            .enumerate()
            .map(|(i, w)| ReduceVars {
                w: b(format!("reduce.{i}.w"), &w.w),
                b: b(format!("reduce.{i}.b"), &w.b),
            })
            .collect();
        let bank = BankVars {
            entries: b("bank.entries".into(), &self.bank.entries),
            pos: b("bank.pos".into(), &self.bank.pos),
        };
        let scale = self
            .scale_embed
            .iter()
            .enumerate()
            .map(|(i, t)| b(format!("scale.{i}"), t))
            .collect();
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, w)| bind_block(w, &format!("layers.{i}"), &mut b))
            .collect();
        let query_readout = self
            .query_readout
            .as_ref()
            .map(|w| bind_attn(w, "query_readout", &mut b));
        let refine = self.refine.as_ref().map(|w| RefineVars {
            patch: w.patch,
            dim: w.dim,
            embed_w: g.constant(w.embed_w.clone()),
            embed_b: g.constant(w.embed_b.clone()),
            blocks: w.blocks.iter().map(|blk| blk.bind(g, false)).collect(),
            fuse_w: b("refine.fuse_w".into(), &w.fuse_w),
            fuse_b: b("refine.fuse_b".into(), &w.fuse_b),
            head_mask_w: b("refine.head_mask_w".into(), &w.head_mask_w),
            head_mask_b: b("refine.head_mask_b".into(), &w.head_mask_b),
            head_bdry_w: b("refine.head_bdry_w".into(), &w.head_bdry_w),
            head_bdry_b: b("refine.head_bdry_b".into(), &w.head_bdry_b),
        });
        let head = self.head.as_ref().map(|w| ConvHeadVars {
            conv1_w: b("head.conv1_w".into(), &w.conv1_w),
            conv1_b: b("head.conv1_b".into(), &w.conv1_b),
            conv2_w: b("head.conv2_w".into(), &w.conv2_w),
            conv2_b: b("head.conv2_b".into(), &w.conv2_b),
        });
        BoundModel {
            squeeze,
            reduce,
            bank,
            scale,
            layers,
            query_readout,
            refine,
            head,
            trainable: registry,
        }
    }

    /// Immutable visit over trainable parameters in registry order.
    pub fn for_each_param(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        let g = Graph::eval();
        let bound = self.bind(&g);
        let names: Vec<String> = bound.trainable.iter().map(|(n, _)| n.clone()).collect();
        let tensors: Vec<Tensor<T>> = bound
            .trainable
            .iter()
            .map(|(_, v)| v.value.clone())
            .collect();
        for (n, t) in names.iter().zip(&tensors) {
            f(n, t);
        }
    }

    /// Mutable visit; names match [`Model::for_each_param`] exactly.
    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, w) in self.squeeze.iter_mut().enumerate() {
            f(&format!("squeeze.{i}.conv_q1"), &mut w.conv_q1);
            f(&format!("squeeze.{i}.b_q1"), &mut w.b_q1);
            f(&format!("squeeze.{i}.conv_s1"), &mut w.conv_s1);
            f(&format!("squeeze.{i}.b_s1"), &mut w.b_s1);
            f(&format!("squeeze.{i}.conv_q2"), &mut w.conv_q2);
            f(&format!("squeeze.{i}.b_q2"), &mut w.b_q2);
            f(&format!("squeeze.{i}.conv_s2"), &mut w.conv_s2);
            f(&format!("squeeze.{i}.b_s2"), &mut w.b_s2);
            f(&format!("squeeze.{i}.proj_w"), &mut w.proj_w);
            f(&format!("squeeze.{i}.proj_b"), &mut w.proj_b);
        }
        for (i, w) in self.reduce.iter_mut().enumerate() {
            f(&format!("reduce.{i}.w"), &mut w.w);
            f(&format!("reduce.{i}.b"), &mut w.b);
        }
        f("bank.entries", &mut self.bank.entries);
        f("bank.pos", &mut self.bank.pos);
        for (i, t) in self.scale_embed.iter_mut().enumerate() {
            f(&format!("scale.{i}"), t);
        }
        for (i, w) in self.layers.iter_mut().enumerate() {
            let p = format!("layers.{i}");
            if let Some((a, n)) = w.self_attn.as_mut() {
                f(&format!("{p}.self.wq"), &mut a.wq);
                f(&format!("{p}.self.wk"), &mut a.wk);
                f(&format!("{p}.self.wv"), &mut a.wv);
                f(&format!("{p}.self.wo"), &mut a.wo);
                f(&format!("{p}.self.ln_gamma"), &mut n.gamma);
                f(&format!("{p}.self.ln_beta"), &mut n.beta);
            }
            f(&format!("{p}.cross.wq"), &mut w.cross_attn.wq);
            f(&format!("{p}.cross.wk"), &mut w.cross_attn.wk);
            f(&format!("{p}.cross.wv"), &mut w.cross_attn.wv);
            f(&format!("{p}.cross.wo"), &mut w.cross_attn.wo);
            f(&format!("{p}.cross.ln_gamma"), &mut w.ln_cross.gamma);
            f(&format!("{p}.cross.ln_beta"), &mut w.ln_cross.beta);
            f(&format!("{p}.ffn_w1"), &mut w.ffn_w1);
            f(&format!("{p}.ffn_b1"), &mut w.ffn_b1);
            f(&format!("{p}.ffn_w2"), &mut w.ffn_w2);
            f(&format!("{p}.ffn_b2"), &mut w.ffn_b2);
            f(&format!("{p}.ffn.ln_gamma"), &mut w.ln_ffn.gamma);
            f(&format!("{p}.ffn.ln_beta"), &mut w.ln_ffn.beta);
        }
        if let Some(w) = self.query_readout.as_mut() {
            f("query_readout.wq", &mut w.wq);
            f("query_readout.wk", &mut w.wk);
            f("query_readout.wv", &mut w.wv);
            f("query_readout.wo", &mut w.wo);
        }
        if let Some(w) = self.refine.as_mut() {
            f("refine.fuse_w", &mut w.fuse_w);
            f("refine.fuse_b", &mut w.fuse_b);
            f("refine.head_mask_w", &mut w.head_mask_w);
            f("refine.head_mask_b", &mut w.head_mask_b);
            f("refine.head_bdry_w", &mut w.head_bdry_w);
            f("refine.head_bdry_b", &mut w.head_bdry_b);
        }
        if let Some(w) = self.head.as_mut() {
            f("head.conv1_w", &mut w.conv1_w);
            f("head.conv1_b", &mut w.conv1_b);
            f("head.conv2_w", &mut w.conv2_w);
            f("head.conv2_b", &mut w.conv2_b);
        }
    }

    /// Distinct parameter-group prefixes, in visit order.
    pub fn param_groups(&self) -> Vec<String> {
        let mut groups: Vec<String> = Vec::new();
        self.for_each_param(&mut |name, _| {
            let group = name.split('.').next().unwrap_or(name);
            if groups.iter().all(|g| g != group) {
                groups.push(group.into());
            }
        });
        groups
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |_, t| n += t.len());
        n
    }
}

fn self_attention_in_layers(cfg: &ModelConfig) -> bool {
    cfg.self_attention
}

fn bind_attn<T: Scalar>(
    w: &AttentionWeights<T>,
    prefix: &str,
    b: &mut impl FnMut(String, &Tensor<T>) -> Var<T>,
) -> AttnVars<T> {
    AttnVars {
        wq: b(format!("{prefix}.wq"), &w.wq),
        wk: b(format!("{prefix}.wk"), &w.wk),
        wv: b(format!("{prefix}.wv"), &w.wv),
        wo: b(format!("{prefix}.wo"), &w.wo),
        n_heads: w.n_heads,
    }
}

fn bind_ln<T: Scalar>(
    w: &LayerNormWeights<T>,
    prefix: &str,
    b: &mut impl FnMut(String, &Tensor<T>) -> Var<T>,
) -> LnVars<T> {
    LnVars {
        gamma: b(format!("{prefix}.ln_gamma"), &w.gamma),
        beta: b(format!("{prefix}.ln_beta"), &w.beta),
    }
}

fn bind_block<T: Scalar>(
    w: &DecoderBlockWeights<T>,
    prefix: &str,
    b: &mut impl FnMut(String, &Tensor<T>) -> Var<T>,
) -> crate::attention::BlockVars<T> {
    crate::attention::BlockVars {
        self_attn: w.self_attn.as_ref().map(|(a, n)| {
            (
                bind_attn(a, &format!("{prefix}.self"), b),
                bind_ln(n, &format!("{prefix}.self"), b),
            )
        }),
        cross_attn: bind_attn(&w.cross_attn, &format!("{prefix}.cross"), b),
        ln_cross: bind_ln(&w.ln_cross, &format!("{prefix}.cross"), b),
        ffn_w1: b(format!("{prefix}.ffn_w1"), &w.ffn_w1),
        ffn_b1: b(format!("{prefix}.ffn_b1"), &w.ffn_b1),
        ffn_w2: b(format!("{prefix}.ffn_w2"), &w.ffn_w2),
        ffn_b2: b(format!("{prefix}.ffn_b2"), &w.ffn_b2),
        ln_ffn: bind_ln(&w.ln_ffn, &format!("{prefix}.ffn"), b),
    }
}

fn bind_squeeze<T: Scalar>(
    w: &SqueezeWeights<T>,
    prefix: &str,
    b: &mut impl FnMut(String, &Tensor<T>) -> Var<T>,
) -> SqueezeVars<T> {
    SqueezeVars {
        conv_q1: b(format!("{prefix}.conv_q1"), &w.conv_q1),
        b_q1: b(format!("{prefix}.b_q1"), &w.b_q1),
        conv_s1: b(format!("{prefix}.conv_s1"), &w.conv_s1),
        b_s1: b(format!("{prefix}.b_s1"), &w.b_s1),
        conv_q2: b(format!("{prefix}.conv_q2"), &w.conv_q2),
        b_q2: b(format!("{prefix}.b_q2"), &w.b_q2),
        conv_s2: b(format!("{prefix}.conv_s2"), &w.conv_s2),
        b_s2: b(format!("{prefix}.b_s2"), &w.b_s2),
        proj_w: b(format!("{prefix}.proj_w"), &w.proj_w),
        proj_b: b(format!("{prefix}.proj_b"), &w.proj_b),
    }
}

/// Graph-bound model weights plus the (name, var) registry of trainable
/// parameters.
pub struct BoundModel<T: Scalar> {
    pub squeeze: Vec<SqueezeVars<T>>,
    pub reduce: Vec<ReduceVars<T>>,
    pub bank: BankVars<T>,
    pub scale: Vec<Var<T>>,
    pub layers: Vec<crate::attention::BlockVars<T>>,
    pub query_readout: Option<AttnVars<T>>,
    pub refine: Option<RefineVars<T>>,
    pub head: Option<ConvHeadVars<T>>,
    pub trainable: Vec<(String, Var<T>)>,
}

/// Per-forward options.
#[derive(Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Seed for token-drop subsets (derived per step by callers).
    pub drop_seed: u64,
    /// Capture the final finest-level cross-attention map.
    pub capture_attention: bool,
}

/// Output of one forward pass.
pub struct ForwardResult<T: Scalar> {
    pub pred: PredVars<T>,
    pub run: RunOutput<T>,
}

fn positional_vars<T: Scalar>(
    g: &Graph<T>,
    dims: &[LevelDims],
    d: usize,
    scale: &[Var<T>],
) -> Result<PositionalVars<T>> {
    let mut st = Vec::with_capacity(dims.len());
    for ld in dims {
        st.push(g.constant(build_spatiotemporal_pe::<T>(ld.t, ld.h, ld.w, d)?));
    }
    Ok(PositionalVars {
        st,
        sc: scale.to_vec(),
    })
}

fn decode_pyramid<T: Scalar>(
    g: &Graph<T>,
    model: &Model<T>,
    bound: &BoundModel<T>,
    pyramid: FeaturePyramid<T>,
    dims: &[LevelDims],
    opts: &ForwardOptions,
) -> Result<RunOutput<T>> {
    let cfg = model.cfg.schedule_config()?;
    let pos = positional_vars(g, dims, model.cfg.d, &bound.scale)?;
    let run_opts = RunOptions {
        drop_ratio: model.cfg.drop_ratio,
        drop_seed: opts.drop_seed,
        capture_attention: opts.capture_attention,
    };
    match model.cfg.decoding {
        Decoding::Memory => run_schedule(
            g,
            &pyramid,
            &bound.bank,
            &pos,
            &bound.layers,
            &cfg,
            &run_opts,
        ),
        Decoding::Query => run_query_schedule(
            g,
            &pyramid,
            &bound.bank,
            &pos,
            &bound.layers,
            bound
                .query_readout
                .as_ref()
                .ok_or_else(|| Error::Config("query decoding needs readout weights".into()))?,
            &cfg,
        ),
    }
}

fn emit_prediction<T: Scalar>(
    g: &Graph<T>,
    _model: &Model<T>,
    bound: &BoundModel<T>,
    query: &Tensor<T>,
    o_finest: &Var<T>,
    finest: LevelDims,
) -> Result<PredVars<T>> {
    if let Some(rv) = &bound.refine {
        boundary_refine(g, query, o_finest, finest, rv)
    } else {
        let head = bound
            .head
            .as_ref()
            .ok_or_else(|| Error::Config("model has neither refinement nor conv head".into()))?;
        conv_head(
            g,
            o_finest,
            finest,
            query.dims()[1],
            query.dims()[2],
            head,
        )
    }
}

/// One-shot few-shot forward: masked support features, hypercorrelation,
/// squeeze, multiscale decoding, prediction heads.
pub fn fsvos_forward_shot<T: Scalar>(
    g: &Graph<T>,
    model: &Model<T>,
    bound: &BoundModel<T>,
    support_image: &Tensor<T>,
    support_mask: &Tensor<T>,
    query: &Tensor<T>,
    opts: &ForwardOptions,
) -> Result<ForwardResult<T>> {
    if model.cfg.mode != Mode::Fsvos {
        return Err(Error::Config(
            "support set supplied to a fully supervised model".into(),
        ));
    }
    let sd = support_image.dims();
    let simg = if sd.len() == 3 {
        support_image.reshape(&[1, sd[0], sd[1], sd[2]])?
    } else {
        support_image.clone()
    };
    let qd = query.dims();
    let dims = model.backbone.level_dims(qd[0], qd[1], qd[2])?;
    let supp_pyr = model.backbone.extract_pyramid(&simg)?;
    let masked = mask_support(&supp_pyr, support_mask)?;
    let query_pyr = model.backbone.extract_pyramid(query)?;
    let corr = hypercorrelation(&masked, &query_pyr)?;
    let pyramid = squeeze_pyramid(g, &corr, &bound.squeeze)?;
    let run = decode_pyramid(g, model, bound, pyramid, &dims, opts)?;
    let pred = emit_prediction(g, model, bound, query, &run.output, dims[model.cfg.levels - 1])?;
    Ok(ForwardResult { pred, run })
}

/// Fully supervised forward: the backbone pyramid is reduced to the
/// decoder width and decoded directly; a conv head emits the mask.
pub fn avos_forward<T: Scalar>(
    g: &Graph<T>,
    model: &Model<T>,
    bound: &BoundModel<T>,
    clip: &Tensor<T>,
    opts: &ForwardOptions,
) -> Result<ForwardResult<T>> {
    if model.cfg.mode != Mode::Avos {
        return Err(Error::Config("avos_forward needs an avos-mode model".into()));
    }
    let qd = clip.dims();
    let dims = model.backbone.level_dims(qd[0], qd[1], qd[2])?;
    let pyr = model.backbone.extract_pyramid(clip)?;
    let mut levels: Vec<(LevelDims, Var<T>)> = Vec::with_capacity(pyr.len());
    for (i, feat) in pyr.iter().enumerate() {
        let rv = &bound.reduce[i];
        let x = g.conv2d(&g.constant(feat.clone()), &rv.w, Some(&rv.b), 1, 0)?;
        let tokens = x.reshape(&[dims[i].tokens(), model.cfg.d])?;
        levels.push((dims[i], tokens));
    }
    let run = decode_pyramid(g, model, bound, FeaturePyramid { levels }, &dims, opts)?;
    let pred = emit_prediction(g, model, bound, clip, &run.output, dims[model.cfg.levels - 1])?;
    Ok(ForwardResult { pred, run })
}

/// One meta-training step over an episode: forward every support shot,
/// average the losses, backpropagate, and apply the optimizer.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut AdamW<T>,
    episode: &Episode<T>,
    step: u64,
) -> Result<f64> {
    let g = Graph::new();
    let bound = model.bind(&g);
    let opts = ForwardOptions {
        drop_seed: crate::rng::derive_seed(model.cfg.seed, "token-drop", step),
        capture_attention: false,
    };
    let mode = match model.cfg.mode {
        Mode::Fsvos => LossMode::Fewshot,
        Mode::Avos => LossMode::Avos,
    };
    let mut total: Option<Var<T>> = None;
    let mut shots = 0usize;
    match model.cfg.mode {
        Mode::Fsvos => {
            if episode.support.is_empty() {
                return Err(Error::Config("few-shot training needs a support set".into()));
            }
            for (img, mask) in &episode.support {
                let fwd = fsvos_forward_shot(&g, model, &bound, img, mask, &episode.query, &opts)?;
                let loss = compute_loss(&g, &fwd.pred, &episode.query_masks, mode)?;
                total = Some(match total {
                    Some(acc) => g.add(&acc, &loss)?,
                    None => loss,
                });
                shots += 1;
            }
        }
        Mode::Avos => {
            if !episode.support.is_empty() {
                return Err(Error::Config("support set supplied in avos mode".into()));
            }
            let fwd = avos_forward(&g, model, &bound, &episode.query, &opts)?;
            let loss = compute_loss(&g, &fwd.pred, &episode.query_masks, mode)?;
            total = Some(loss);
            shots = 1;
        }
    }
    let mut loss = total.expect("at least one shot");
    if shots > 1 {
        loss = g.scale(&loss, T::one() / su::<T>(shots))?;
    }
    let loss_value = loss
        .value
        .data()[0]
        .to_f64()
        .ok_or_else(|| Error::Eval("loss not representable".into()))?;
    if !loss_value.is_finite() {
        return Err(Error::Eval(format!("non-finite loss at step {step}")));
    }
    let grads_store = g.backward(&loss)?;
    let mut grads: BTreeMap<String, Vec<T>> = BTreeMap::new();
    for (name, var) in &bound.trainable {
        if let Some(gv) = grads_store.get(var) {
            grads.insert(name.clone(), gv.to_vec());
        }
    }
    opt.step(&grads, |f| model.for_each_param_mut(f))?;
    Ok(loss_value)
}

/// Evaluation output for one episode.
pub struct EvalPrediction<T: Scalar> {
    /// Combined foreground probability map `[T,H,W]`.
    pub mask_probs: Tensor<T>,
    /// Per-shot normalized combination weights.
    pub shot_weights: Vec<T>,
    pub uniform_fallback: bool,
    /// Final-layer cross-attention map when requested.
    pub attention: Option<Tensor<T>>,
}

/// Few-shot inference over all K shots with optional adaptive reweighting.
pub fn fsvos_predict<T: Scalar>(
    model: &Model<T>,
    episode: &Episode<T>,
    adaptive: bool,
    opts: &ForwardOptions,
) -> Result<EvalPrediction<T>> {
    if episode.support.is_empty() {
        return Err(Error::Config("few-shot inference needs a support set".into()));
    }
    let g = Graph::eval();
    let bound = model.bind(&g);
    let qd = episode.query.dims();
    let dims = model.backbone.level_dims(qd[0], qd[1], qd[2])?;
    let coarse = dims[0];
    let query_pyr_l1 = model.backbone.extract_pyramid(&episode.query)?
        .into_iter()
        .next()
        .expect("at least one level");
    let mut preds: Vec<Prediction<T>> = Vec::with_capacity(episode.support.len());
    let mut pairs: Vec<(Vec<T>, Vec<T>)> = Vec::with_capacity(episode.support.len());
    let mut attention = None;
    for (img, mask) in &episode.support {
        let fwd = fsvos_forward_shot(&g, model, &bound, img, mask, &episode.query, opts)?;
        if attention.is_none() {
            attention = fwd.run.attention.clone();
        }
        let pred = fwd.pred.detach();
        // pooled coarsest features: support under its ground truth, query
        // under this shot's soft prediction
        let sd = img.dims();
        let simg = img.reshape(&[1, sd[0], sd[1], sd[2]])?;
        let supp_l1 = model
            .backbone
            .extract_pyramid(&simg)?
            .into_iter()
            .next()
            .expect("level");
        let smask = resize_mask_soft(mask.data(), sd[0], sd[1], coarse.h, coarse.w);
        let sup_vec = pool_or_zero(&supp_l1, &smask, 1, coarse.h, coarse.w);
        let probs = prediction_probs(&pred);
        let qmask = soft_clip_mask(&probs, coarse);
        let qry_vec = pool_or_zero(&query_pyr_l1, &qmask, coarse.t, coarse.h, coarse.w);
        pairs.push((sup_vec, qry_vec));
        preds.push(pred);
    }
    let (weights, fallback) = if adaptive {
        kshot_weights(&pairs)?
    } else {
        (
            vec![T::one() / su::<T>(preds.len()); preds.len()],
            false,
        )
    };
    let combined = adaptive_combine(&preds, &weights, fallback)?;
    Ok(EvalPrediction {
        mask_probs: combined.mask_probs,
        shot_weights: normalized(&weights),
        uniform_fallback: combined.uniform_fallback,
        attention,
    })
}

fn soft_clip_mask<T: Scalar>(probs: &Tensor<T>, coarse: LevelDims) -> Vec<T> {
    // per-frame soft resize of the probability map to the coarsest grid
    let d = probs.dims();
    let (t, h, w) = (d[0], d[1], d[2]);
    let mut out = Vec::with_capacity(coarse.tokens());
    for ti in 0..t {
        let frame = &probs.data()[ti * h * w..(ti + 1) * h * w];
        out.extend(resize_mask_soft(frame, h, w, coarse.h, coarse.w));
    }
    out
}

fn pool_or_zero<T: Scalar>(
    features: &Tensor<T>,
    mask: &[T],
    t: usize,
    h: usize,
    w: usize,
) -> Vec<T> {
    let c = features.dims()[3];
    let total: T = mask.iter().fold(T::zero(), |a, &b| a + b);
    if total <= T::zero() {
        return vec![T::zero(); c];
    }
    let mut acc = vec![T::zero(); c];
    for p in 0..t * h * w {
        let m = mask[p];
        if m == T::zero() {
            continue;
        }
        let row = &features.data()[p * c..(p + 1) * c];
        for (a, v) in acc.iter_mut().zip(row) {
            *a = *a + m * *v;
        }
    }
    for a in acc.iter_mut() {
        *a = *a / total;
    }
    acc
}

/// Fully supervised inference: probability map for one clip.
pub fn avos_predict<T: Scalar>(
    model: &Model<T>,
    clip: &Tensor<T>,
    opts: &ForwardOptions,
) -> Result<EvalPrediction<T>> {
    let g = Graph::eval();
    let bound = model.bind(&g);
    let fwd = avos_forward(&g, model, &bound, clip, opts)?;
    let pred = fwd.pred.detach();
    Ok(EvalPrediction {
        mask_probs: prediction_probs(&pred),
        shot_weights: vec![T::one()],
        uniform_fallback: false,
        attention: fwd.run.attention,
    })
}

/// Multiscale inference postprocessing: runs `infer` on rescaled clips,
/// resizes each probability map back, and averages. Scales whose rescaled
/// extents the model rejects are skipped and reported.
pub fn multiscale_inference<T: Scalar>(
    infer: impl Fn(&Tensor<T>) -> Result<Tensor<T>>,
    clip: &Tensor<T>,
    scales: &[f64],
) -> Result<(Tensor<T>, Vec<f64>, Vec<f64>)> {
    if scales.is_empty() {
        return Err(Error::Config("multiscale inference needs scales".into()));
    }
    let d = clip.dims();
    let (t, h, w, c) = (d[0], d[1], d[2], d[3]);
    let mut acc: Option<Vec<T>> = None;
    let mut used = Vec::new();
    let mut skipped = Vec::new();
    for &sc in scales {
        let h2 = ((h as f64) * sc).round() as usize;
        let w2 = ((w as f64) * sc).round() as usize;
        if h2 == 0 || w2 == 0 {
            skipped.push(sc);
            continue;
        }
        let resized = Tensor::new(
            &[t, h2, w2, c],
            bilinear_resize_kernel(clip.data(), t, h, w, c, h2, w2),
        )?;
        match infer(&resized) {
            Ok(probs) => {
                let pd = probs.dims().to_vec();
                let back = bilinear_resize_kernel(probs.data(), pd[0], pd[1], pd[2], 1, h, w);
                match acc.as_mut() {
                    Some(a) => {
                        for (x, y) in a.iter_mut().zip(&back) {
                            *x = *x + *y;
                        }
                    }
                    None => acc = Some(back),
                }
                used.push(sc);
            }
            Err(Error::Config(_)) => skipped.push(sc),
            Err(e) => return Err(e),
        }
    }
    let Some(mut a) = acc else {
        return Err(Error::Config(format!(
            "all scales {scales:?} were invalid for the model"
        )));
    };
    let inv = T::one() / su::<T>(used.len());
    for v in a.iter_mut() {
        *v = *v * inv;
    }
    Ok((Tensor::new(&[t, h, w], a)?, used, skipped))
}

/// Finite-difference step ladder used for whole-model gradient checks;
/// see `grad_check_refined` for why several steps are needed.
pub const MODEL_CHECK_STEPS: [f64; 4] = [1e-4, 1e-3, 1e-5, 3e-6];

/// Per-group gradient verification on a full model forward + loss.
/// Returns the max relative error for the named parameter group.
pub fn grad_check_model_group(
    model: &Model<f64>,
    episode: &Episode<f64>,
    group: &str,
    steps: &[f64],
    tamper: Option<(usize, usize, f64)>,
) -> Result<f64> {
    let mut names: Vec<String> = Vec::new();
    let mut params: Vec<Tensor<f64>> = Vec::new();
    model.for_each_param(&mut |name, t| {
        if name.split('.').next() == Some(group) {
            names.push(name.into());
            params.push(t.clone());
        }
    });
    if params.is_empty() {
        return Err(Error::Config(format!("no parameters in group {group}")));
    }
    let mode = match model.cfg.mode {
        Mode::Fsvos => LossMode::Fewshot,
        Mode::Avos => LossMode::Avos,
    };
    crate::tensor::grad_check_refined(
        |g, vars| {
            let mut overrides = BTreeMap::new();
            for (n, v) in names.iter().zip(vars) {
                overrides.insert(n.clone(), v.clone());
            }
            let bound = model.bind_with_overrides(g, &overrides);
            let opts = ForwardOptions::default();
            let pred = match model.cfg.mode {
                Mode::Fsvos => {
                    let (img, mask) = &episode.support[0];
                    fsvos_forward_shot(g, model, &bound, img, mask, &episode.query, &opts)?.pred
                }
                Mode::Avos => avos_forward(g, model, &bound, &episode.query, &opts)?.pred,
            };
            compute_loss(g, &pred, &episode.query_masks, mode)
        },
        &params,
        steps,
        tamper,
    )
}

/// Analytic token/attention accounting for a configuration, with no
/// execution: per level and per visit, how many tokens enter
/// self-attention and how many score-matrix elements each attention
/// builds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenEstimate {
    /// (level, query tokens) per pyramid level, coarsest first.
    pub level_tokens: Vec<(usize, usize)>,
    pub visits: Vec<VisitEstimate>,
    pub total_self_elements: usize,
    pub total_cross_elements: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VisitEstimate {
    pub level: usize,
    pub self_tokens: usize,
    pub self_elements: usize,
    pub cross_elements: usize,
}

/// Matches the executed counters of [`run_schedule`] /
/// [`run_query_schedule`] exactly.
pub fn estimate_tokens(cfg: &ModelConfig, t: usize) -> Result<TokenEstimate> {
    cfg.validate()?;
    let counts = cfg.level_token_counts(t);
    let order = cfg.schedule_config()?.visit_order();
    let mut visits = Vec::with_capacity(order.len());
    let mut total_self = 0usize;
    let mut total_cross = 0usize;
    for &level in &order {
        let tokens = counts[level - 1];
        let (self_tokens, self_elements) = match cfg.decoding {
            Decoding::Memory => {
                if cfg.self_attention {
                    let kept = if level == cfg.levels {
                        crate::attention::kept_tokens(tokens, cfg.drop_ratio)
                    } else {
                        tokens
                    };
                    (kept, kept * kept)
                } else {
                    (0, 0)
                }
            }
            Decoding::Query => {
                if cfg.self_attention {
                    (cfg.n_mem, cfg.n_mem * cfg.n_mem)
                } else {
                    (0, 0)
                }
            }
        };
        let cross_elements = match cfg.decoding {
            Decoding::Memory => tokens * cfg.n_mem,
            Decoding::Query => cfg.n_mem * tokens,
        };
        total_self += self_elements;
        total_cross += cross_elements;
        visits.push(VisitEstimate {
            level,
            self_tokens,
            self_elements,
            cross_elements,
        });
    }
    Ok(TokenEstimate {
        level_tokens: (1..=cfg.levels).map(|l| (l, counts[l - 1])).collect(),
        visits,
        total_self_elements: total_self,
        total_cross_elements: total_cross,
    })
}

//! Full UniMixer assembly: feature tokenization, a stack of mixing blocks
//! wrapped in SiameseNorm, and a linear head producing one logit.
//!
//! Two forward paths share the same parameters:
//!
//! * [`model_forward`] runs one sample with plain kernels and is the reference.
//! * [`build_graph`] records a batched forward on an autodiff [`Graph`] for training.
//!
//! Tests pin the two together to 1e-10 for every mixer variant.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, NodeId};
use crate::mixing::{
    forward_apply, LiteParams, MixVariant, MixingParams, MixingWeights, MulCounter, UniMixingParams,
};
use crate::reference::verify_perm_properties;
use crate::reference::PermSpec;
use crate::sinkhorn::{ConstraintConfig, SinkhornMode};
use crate::tensor::{dot, reshape, rms_norm, sigmoid, Matrix, Vector, RMS_EPS};

/// Std of the raw mixing weights at initialization.
pub const MIXING_INIT_STD: f64 = 0.02;
/// Std of embedding table entries at initialization.
pub const EMBEDDING_INIT_STD: f64 = 0.01;

/// Token-mixing paradigm used inside every block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "self-attn")]
    SelfAttention,
    #[serde(rename = "hetero-attn")]
    HeteroAttention,
    #[serde(rename = "tokenmixer")]
    TokenMixer,
    #[serde(rename = "fm")]
    Fm,
    #[serde(rename = "unimixing")]
    UniMixing,
    #[serde(rename = "unimixing-lite")]
    UniMixingLite,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::SelfAttention,
        Variant::HeteroAttention,
        Variant::TokenMixer,
        Variant::Fm,
        Variant::UniMixing,
        Variant::UniMixingLite,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SelfAttention => "self-attn",
            Variant::HeteroAttention => "hetero-attn",
            Variant::TokenMixer => "tokenmixer",
            Variant::Fm => "fm",
            Variant::UniMixing => "unimixing",
            Variant::UniMixingLite => "unimixing-lite",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}'")))
    }
}

/// One input feature field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FieldSpec {
    /// Looked up in a `cardinality × embed_dim` table.
    Categorical { name: String, cardinality: usize, embed_dim: usize },
    /// Passed through unchanged.
    Dense { name: String, dim: usize },
}

impl FieldSpec {
    pub fn name(&self) -> &str {
        match self {
            FieldSpec::Categorical { name, .. } | FieldSpec::Dense { name, .. } => name,
        }
    }

    /// Width of this field's slice of the concatenated embedding `E`.
    pub fn width(&self) -> usize {
        match self {
            FieldSpec::Categorical { embed_dim, .. } => *embed_dim,
            FieldSpec::Dense { dim, .. } => *dim,
        }
    }
}

/// Shape and hyperparameters of a [`UniMixerModel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub fields: Vec<FieldSpec>,
    /// Chunk size `d` the embedding vector is split into.
    pub chunk: usize,
    /// Token width `D`.
    pub token_dim: usize,
    /// Block size `B` for UniMixing and the per-token SwiGLU.
    pub block: usize,
    /// Number of blocks `M`.
    pub num_blocks: usize,
    /// SwiGLU expansion factor `n`.
    pub expansion: usize,
    pub variant: Variant,
    /// Lite global rank `r`.
    pub rank: usize,
    /// Lite basis size `b`.
    pub basis: usize,
    /// Sinkhorn settings; `tau` is the temperature the model currently runs at
    /// and `max_iters` is the fixed unroll depth.
    pub constraint: ConstraintConfig,
}

impl ModelConfig {
    pub fn embed_len(&self) -> usize {
        self.fields.iter().map(FieldSpec::width).sum()
    }

    /// Number of tokens `T = len(E) / d`.
    pub fn tokens(&self) -> usize {
        self.embed_len() / self.chunk.max(1)
    }

    /// Flattened stream length `L = T·D`.
    pub fn stream_len(&self) -> usize {
        self.tokens() * self.token_dim
    }

    pub fn dense_dim(&self) -> usize {
        self.fields
            .iter()
            .map(|f| match f {
                FieldSpec::Dense { dim, .. } => *dim,
                FieldSpec::Categorical { .. } => 0,
            })
            .sum()
    }

    pub fn categorical_fields(&self) -> usize {
        self.fields.iter().filter(|f| matches!(f, FieldSpec::Categorical { .. })).count()
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.fields.is_empty() {
            return cfg("at least one feature field is required".into());
        }
        for f in &self.fields {
            if f.width() == 0 {
                return cfg(format!("field '{}' has zero width", f.name()));
            }
            if let FieldSpec::Categorical { cardinality: 0, name, .. } = f {
                return cfg(format!("field '{name}' has zero cardinality"));
            }
        }
        if self.chunk == 0 || self.embed_len() % self.chunk != 0 {
            return cfg(format!("embedding length {} is not divisible by chunk size {}", self.embed_len(), self.chunk));
        }
        if self.token_dim == 0 || self.num_blocks == 0 || self.expansion == 0 {
            return cfg("token_dim, num_blocks and expansion must be at least 1".into());
        }
        let l = self.stream_len();
        if self.block == 0 || l % self.block != 0 {
            return cfg(format!("stream length {l} is not divisible by block size {}", self.block));
        }
        if self.variant == Variant::TokenMixer && self.token_dim % self.tokens() != 0 {
            return cfg(format!("tokenmixer needs token_dim {} divisible by {} tokens", self.token_dim, self.tokens()));
        }
        if self.variant == Variant::UniMixingLite && (self.rank == 0 || self.basis == 0) {
            return cfg("unimixing-lite needs rank and basis of at least 1".into());
        }
        self.constraint.validate()
    }
}

/// Features of one sample: one index per categorical field and the
/// concatenated values of all dense fields, both in field order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct DomainFeatures {
    pub categorical: Vec<usize>,
    pub dense: Vec<f64>,
}

/// A batch in columnar form.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `categorical[f][s]` is the index of sample `s` in categorical field `f`.
    pub categorical: Vec<Vec<usize>>,
    /// `N × dense_dim`.
    pub dense: Matrix,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.dense.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn from_samples(samples: &[DomainFeatures], dense_dim: usize) -> Result<Self> {
        let fields = samples.first().map_or(0, |s| s.categorical.len());
        let mut categorical = vec![Vec::with_capacity(samples.len()); fields];
        let mut dense = Vec::with_capacity(samples.len() * dense_dim);
        for s in samples {
            if s.categorical.len() != fields || s.dense.len() != dense_dim {
                return dim_err("samples in a batch must share one feature layout");
            }
            for (col, &v) in categorical.iter_mut().zip(&s.categorical) {
                col.push(v);
            }
            dense.extend_from_slice(&s.dense);
        }
        Ok(Self { categorical, dense: Matrix::new(samples.len(), dense_dim, dense)? })
    }
}

/// Embedding tables plus per-chunk token projections.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerParams {
    pub fields: Vec<FieldSpec>,
    /// One table per categorical field, in field order.
    pub tables: Vec<Matrix>,
    pub chunk: usize,
    /// `proj[i]` is `D × d`; token `i` is `proj[i] · E[d·i .. d·i + d] + bias[i]`.
    pub proj: Vec<Matrix>,
    /// `1 × D` each.
    pub bias: Vec<Matrix>,
}

/// Per-token SwiGLU weights, one set per block of width `B`.
#[derive(Clone, Debug, PartialEq)]
pub struct PSwiGLUParams {
    /// `B × nB` each.
    pub up: Vec<Matrix>,
    pub gate: Vec<Matrix>,
    /// `nB × B` each.
    pub down: Vec<Matrix>,
    /// `1 × nB` each.
    pub b_up: Vec<Matrix>,
    pub b_gate: Vec<Matrix>,
    /// `1 × B` each.
    pub b_down: Vec<Matrix>,
}

/// The token mixer of one block.
#[derive(Clone, Debug, PartialEq)]
pub enum BlockMixer {
    UniMixing(UniMixingParams),
    Lite(LiteParams),
    TokenMixer,
    /// Shared `D × D` projections.
    SelfAttention { wq: Matrix, wk: Matrix, wv: Matrix },
    /// Token-specific `D × D` projections, single head.
    HeteroAttention { query: Vec<Matrix>, key: Vec<Matrix>, value: Vec<Matrix> },
    /// `T × D` projection of `X Xᵀ`.
    Fm { y: Matrix },
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub mixer: BlockMixer,
    pub swiglu: PSwiGLUParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UniMixerModel {
    pub config: ModelConfig,
    pub tokenizer: TokenizerParams,
    pub blocks: Vec<BlockParams>,
    /// `L × 1`.
    pub head_w: Matrix,
    /// `1 × 1`.
    pub head_b: Matrix,
}

/// Parameter families, used for grouping counts and gradient checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    Embedding,
    Projection,
    GlobalRaw,
    LocalRaw,
    LowRankA,
    LowRankB,
    Basis,
    Omega,
    Attention,
    FmProjection,
    SwiGLU,
    Head,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Embedding => "embedding",
            Family::Projection => "projection",
            Family::GlobalRaw => "global_raw",
            Family::LocalRaw => "local_raw",
            Family::LowRankA => "a_g",
            Family::LowRankB => "b_g",
            Family::Basis => "basis",
            Family::Omega => "omega",
            Family::Attention => "attention",
            Family::FmProjection => "fm_y",
            Family::SwiGLU => "swiglu",
            Family::Head => "head",
        }
    }
}

/// Visits every parameter matrix in one canonical order. Expanded for both
/// shared and mutable borrows so the two orders cannot drift apart.
macro_rules! walk_params {
    ($model:expr, $f:expr, $($m:ident)?) => {{
        let model = $model;
        let f = $f;
        for (i, t) in (& $($m)? model.tokenizer.tables).into_iter().enumerate() {
            f(format!("tokenizer.table{i}"), Family::Embedding, t);
        }
        for (i, p) in (& $($m)? model.tokenizer.proj).into_iter().enumerate() {
            f(format!("tokenizer.proj{i}"), Family::Projection, p);
        }
        for (i, b) in (& $($m)? model.tokenizer.bias).into_iter().enumerate() {
            f(format!("tokenizer.bias{i}"), Family::Projection, b);
        }
        for (k, block) in (& $($m)? model.blocks).into_iter().enumerate() {
            match & $($m)? block.mixer {
                BlockMixer::UniMixing(p) => {
                    f(format!("block{k}.global_raw"), Family::GlobalRaw, & $($m)? p.global_raw);
                    for (i, w) in (& $($m)? p.local_raw).into_iter().enumerate() {
                        f(format!("block{k}.local_raw{i}"), Family::LocalRaw, w);
                    }
                }
                BlockMixer::Lite(p) => {
                    f(format!("block{k}.a_g"), Family::LowRankA, & $($m)? p.a_g);
                    f(format!("block{k}.b_g"), Family::LowRankB, & $($m)? p.b_g);
                    for (i, z) in (& $($m)? p.basis).into_iter().enumerate() {
                        f(format!("block{k}.basis{i}"), Family::Basis, z);
                    }
                    f(format!("block{k}.omega"), Family::Omega, & $($m)? p.omega);
                }
                BlockMixer::TokenMixer => {}
                BlockMixer::SelfAttention { wq, wk, wv } => {
                    f(format!("block{k}.wq"), Family::Attention, wq);
                    f(format!("block{k}.wk"), Family::Attention, wk);
                    f(format!("block{k}.wv"), Family::Attention, wv);
                }
                BlockMixer::HeteroAttention { query, key, value } => {
                    for (i, w) in query.into_iter().enumerate() {
                        f(format!("block{k}.query{i}"), Family::Attention, w);
                    }
                    for (i, w) in key.into_iter().enumerate() {
                        f(format!("block{k}.key{i}"), Family::Attention, w);
                    }
                    for (i, w) in value.into_iter().enumerate() {
                        f(format!("block{k}.value{i}"), Family::Attention, w);
                    }
                }
                BlockMixer::Fm { y } => f(format!("block{k}.fm_y"), Family::FmProjection, y),
            }
            let s = & $($m)? block.swiglu;
            for (name, list) in [("up", & $($m)? s.up), ("gate", & $($m)? s.gate), ("down", & $($m)? s.down)] {
                for (i, w) in list.into_iter().enumerate() {
                    f(format!("block{k}.swiglu.{name}{i}"), Family::SwiGLU, w);
                }
            }
            for (name, list) in [("b_up", & $($m)? s.b_up), ("b_gate", & $($m)? s.b_gate), ("b_down", & $($m)? s.b_down)] {
                for (i, w) in list.into_iter().enumerate() {
                    f(format!("block{k}.swiglu.{name}{i}"), Family::SwiGLU, w);
                }
            }
        }
        f("head.w".to_string(), Family::Head, & $($m)? model.head_w);
        f("head.b".to_string(), Family::Head, & $($m)? model.head_b);
    }};
}

/// Per-module breakdown of trainable scalars.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub embedding: usize,
    pub tokenizer: usize,
    pub mixing: usize,
    pub swiglu: usize,
    pub head: usize,
}

impl ParamBreakdown {
    /// Dense parameters: everything except embedding tables.
    pub fn dense(&self) -> usize {
        self.tokenizer + self.mixing + self.swiglu + self.head
    }

    pub fn total(&self) -> usize {
        self.dense() + self.embedding
    }
}

fn normal<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Matrix {
    Matrix::random_normal(rows, cols, std, rng)
}

fn fan_in<R: Rng + ?Sized>(rows: usize, cols: usize, fan: usize, rng: &mut R) -> Matrix {
    normal(rows, cols, 1.0 / (fan as f64).sqrt(), rng)
}

impl PSwiGLUParams {
    pub fn random<R: Rng + ?Sized>(tokens: usize, block: usize, expansion: usize, rng: &mut R) -> Self {
        let h = expansion * block;
        Self {
            up: (0..tokens).map(|_| fan_in(block, h, block, rng)).collect(),
            gate: (0..tokens).map(|_| fan_in(block, h, block, rng)).collect(),
            down: (0..tokens).map(|_| fan_in(h, block, h, rng)).collect(),
            b_up: vec![Matrix::zeros(1, h); tokens],
            b_gate: vec![Matrix::zeros(1, h); tokens],
            b_down: vec![Matrix::zeros(1, block); tokens],
        }
    }

    pub fn zeros(tokens: usize, block: usize, expansion: usize) -> Self {
        let h = expansion * block;
        Self {
            up: vec![Matrix::zeros(block, h); tokens],
            gate: vec![Matrix::zeros(block, h); tokens],
            down: vec![Matrix::zeros(h, block); tokens],
            b_up: vec![Matrix::zeros(1, h); tokens],
            b_gate: vec![Matrix::zeros(1, h); tokens],
            b_down: vec![Matrix::zeros(1, block); tokens],
        }
    }

    pub fn tokens(&self) -> usize {
        self.up.len()
    }
}

impl UniMixerModel {
    /// Random initialization: mixing raw weights N(0, 0.02²), embedding
    /// tables N(0, 0.01²), every projection N(0, 1/fan_in), biases zero.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (t, d, big_d, b) = (config.tokens(), config.chunk, config.token_dim, config.block);
        let l = config.stream_len();
        let n = l / b;
        let tables = config
            .fields
            .iter()
            .filter_map(|f| match f {
                FieldSpec::Categorical { cardinality, embed_dim, .. } => {
                    Some(normal(*cardinality, *embed_dim, EMBEDDING_INIT_STD, rng))
                }
                FieldSpec::Dense { .. } => None,
            })
            .collect();
        let tokenizer = TokenizerParams {
            fields: config.fields.clone(),
            tables,
            chunk: d,
            proj: (0..t).map(|_| fan_in(big_d, d, d, rng)).collect(),
            bias: vec![Matrix::zeros(1, big_d); t],
        };
        let constraint = config.constraint;
        let mut blocks = Vec::with_capacity(config.num_blocks);
        for _ in 0..config.num_blocks {
            let mixer = match config.variant {
                Variant::UniMixing => {
                    BlockMixer::UniMixing(UniMixingParams::random(l, b, MIXING_INIT_STD, constraint, rng)?)
                }
                Variant::UniMixingLite => BlockMixer::Lite(LiteParams::random(
                    l,
                    b,
                    config.rank,
                    config.basis,
                    MIXING_INIT_STD,
                    constraint,
                    rng,
                )?),
                Variant::TokenMixer => BlockMixer::TokenMixer,
                Variant::SelfAttention => BlockMixer::SelfAttention {
                    wq: fan_in(big_d, big_d, big_d, rng),
                    wk: fan_in(big_d, big_d, big_d, rng),
                    wv: fan_in(big_d, big_d, big_d, rng),
                },
                Variant::HeteroAttention => BlockMixer::HeteroAttention {
                    query: (0..t).map(|_| fan_in(big_d, big_d, big_d, rng)).collect(),
                    key: (0..t).map(|_| fan_in(big_d, big_d, big_d, rng)).collect(),
                    value: (0..t).map(|_| fan_in(big_d, big_d, big_d, rng)).collect(),
                },
                // X Xᵀ has entries of order D for unit-scale tokens.
                Variant::Fm => BlockMixer::Fm { y: normal(t, big_d, 1.0 / (big_d as f64 * (t as f64).sqrt()), rng) },
            };
            blocks.push(BlockParams { mixer, swiglu: PSwiGLUParams::random(n, b, config.expansion, rng) });
        }
        let head_w = fan_in(l, 1, l, rng);
        Ok(Self { config, tokenizer, blocks, head_w, head_b: Matrix::zeros(1, 1) })
    }

    pub fn stream_len(&self) -> usize {
        self.config.stream_len()
    }

    pub fn tau(&self) -> f64 {
        self.config.constraint.tau
    }

    /// Sets the temperature used by [`model_forward`] and stored in checkpoints.
    pub fn set_tau(&mut self, tau: f64) {
        self.config.constraint.tau = tau;
        for block in &mut self.blocks {
            match &mut block.mixer {
                BlockMixer::UniMixing(p) => p.constraint.tau = tau,
                BlockMixer::Lite(p) => p.constraint.tau = tau,
                _ => {}
            }
        }
    }

    /// Visits `(name, family, matrix)` for every trainable array in canonical order.
    pub fn visit_params(&self, mut f: impl FnMut(String, Family, &Matrix)) {
        walk_params!(self, &mut f,);
    }

    pub fn visit_params_mut(&mut self, mut f: impl FnMut(String, Family, &mut Matrix)) {
        walk_params!(self, &mut f, mut);
    }

    pub fn param_names(&self) -> Vec<(String, Family)> {
        let mut out = Vec::new();
        self.visit_params(|name, fam, _| out.push((name, fam)));
        out
    }

    pub fn params(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        walk_params!(self, &mut |_, _, m| out.push(m),);
        out
    }

    pub fn param_breakdown(&self) -> ParamBreakdown {
        let mut out = ParamBreakdown::default();
        self.visit_params(|_, fam, m| {
            let slot = match fam {
                Family::Embedding => &mut out.embedding,
                Family::Projection => &mut out.tokenizer,
                Family::SwiGLU => &mut out.swiglu,
                Family::Head => &mut out.head,
                _ => &mut out.mixing,
            };
            *slot += m.len();
        });
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let fresh = UniMixerModel::new(self.config.clone(), &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        let mut want = Vec::new();
        fresh.visit_params(|name, _, m| want.push((name, m.shape())));
        let mut got = Vec::new();
        self.visit_params(|name, _, m| got.push((name, m.shape())));
        if want != got {
            return dim_err("model parameters do not match the shapes implied by its config");
        }
        Ok(())
    }
}

/// Concatenated embedding `E` of one sample.
pub fn embed(features: &DomainFeatures, p: &TokenizerParams) -> Result<Vector> {
    let mut out = Vec::new();
    let (mut cat, mut dense) = (0, 0);
    for field in &p.fields {
        match field {
            FieldSpec::Categorical { name, cardinality, .. } => {
                let idx = *features
                    .categorical
                    .get(cat)
                    .ok_or_else(|| Error::Dimension(format!("missing index for field '{name}'")))?;
                if idx >= *cardinality {
                    return Err(Error::Dimension(format!("index {idx} out of range for field '{name}' ({cardinality})")));
                }
                out.extend_from_slice(p.tables[cat].row(idx));
                cat += 1;
            }
            FieldSpec::Dense { name, dim } => {
                let vals = features
                    .dense
                    .get(dense..dense + dim)
                    .ok_or_else(|| Error::Dimension(format!("missing dense values for field '{name}'")))?;
                out.extend_from_slice(vals);
                dense += dim;
            }
        }
    }
    if cat != features.categorical.len() || dense != features.dense.len() {
        return dim_err("feature vector has more entries than the field layout");
    }
    Ok(Vector::new(out))
}

/// `x_i = W^proj_i · E[d·i .. d·i + d] + b_i`, stacked into `T × D`.
pub fn tokenize(e: &[f64], p: &TokenizerParams) -> Result<Matrix> {
    let t = p.proj.len();
    let d = p.chunk;
    if e.len() != t * d {
        return dim_err(format!("embedding length {} != {t} tokens × chunk {d}", e.len()));
    }
    let big_d = p.proj.first().map_or(0, Matrix::rows);
    let mut out = Matrix::zeros(t, big_d);
    for i in 0..t {
        let w = &p.proj[i];
        if w.shape() != (big_d, d) || p.bias[i].shape() != (1, big_d) {
            return dim_err(format!("projection {i} must be {big_d}x{d} with a 1x{big_d} bias"));
        }
        let x = w.matvec(&e[i * d..(i + 1) * d])?;
        for (o, (v, b)) in out.row_mut(i).iter_mut().zip(x.iter().zip(p.bias[i].data())) {
            *o = v + b;
        }
    }
    Ok(out)
}

fn row_times(v: &[f64], w: &Matrix, bias: &Matrix) -> Vec<f64> {
    let mut out = bias.data().to_vec();
    for (k, &vk) in v.iter().enumerate() {
        out.iter_mut().zip(w.row(k)).for_each(|(o, &wk)| *o += vk * wk);
    }
    out
}

/// Row `i` becomes `((o_i W_up + b_up) ⊙ swish(o_i W_gate + b_gate)) W_down + b_down`
/// with the weights of token `i`.
pub fn pertoken_swiglu(o: &Matrix, p: &PSwiGLUParams) -> Result<Matrix> {
    let (n, b) = o.shape();
    if p.tokens() != n {
        return dim_err(format!("{n} rows but {} SwiGLU weight sets", p.tokens()));
    }
    let mut out = Matrix::zeros(n, b);
    for i in 0..n {
        let h = p.up[i].cols();
        if p.up[i].shape() != (b, h) || p.gate[i].shape() != (b, h) || p.down[i].shape() != (h, b) {
            return dim_err(format!("SwiGLU weights of token {i} do not match width {b}"));
        }
        let up = row_times(o.row(i), &p.up[i], &p.b_up[i]);
        let gate = row_times(o.row(i), &p.gate[i], &p.b_gate[i]);
        let z: Vec<f64> = up.iter().zip(&gate).map(|(u, g)| u * g * sigmoid(*g)).collect();
        out.row_mut(i).copy_from_slice(&row_times(&z, &p.down[i], &p.b_down[i]));
    }
    Ok(out)
}

/// The two coupled residual streams.
#[derive(Clone, Debug, PartialEq)]
pub struct SiameseState {
    pub x_bar: Vector,
    pub y_bar: Vector,
}

impl SiameseState {
    pub fn new(input: Vector) -> Self {
        Self { x_bar: input.clone(), y_bar: input }
    }
}

/// `Ỹ = rms(Ȳ)`, `O = block(X̄ + Ỹ)`, `X̄' = rms(X̄ + O)`, `Ȳ' = Ȳ + O`.
pub fn siamese_step(
    state: &SiameseState,
    block: impl FnOnce(&[f64]) -> Result<Vector>,
) -> Result<SiameseState> {
    if state.x_bar.len() != state.y_bar.len() {
        return dim_err("Siamese streams differ in length");
    }
    let y_tilde = rms_norm(&state.y_bar, RMS_EPS)?;
    let o = block(&state.x_bar.add(&y_tilde)?)?;
    Ok(SiameseState {
        x_bar: rms_norm(&state.x_bar.add(&o)?, RMS_EPS)?,
        y_bar: state.y_bar.add(&o)?,
    })
}

/// `X̄ + rms(Ȳ)`.
pub fn siamese_finalize(state: &SiameseState) -> Result<Vector> {
    state.x_bar.add(&rms_norm(&state.y_bar, RMS_EPS)?)
}

/// A block mixer with its constrained weights materialized for one temperature.
enum PreparedMixer {
    Weights(MixingWeights),
    Variant(MixVariant),
}

fn prepare_mixer(mixer: &BlockMixer, cfg: &ModelConfig) -> Result<PreparedMixer> {
    let tau = cfg.constraint.tau;
    Ok(match mixer {
        BlockMixer::UniMixing(p) => {
            PreparedMixer::Weights(MixingParams::Full(p.clone()).materialize(tau, SinkhornMode::FixedDepth)?)
        }
        BlockMixer::Lite(p) => {
            PreparedMixer::Weights(MixingParams::Lite(p.clone()).materialize(tau, SinkhornMode::FixedDepth)?)
        }
        BlockMixer::TokenMixer => PreparedMixer::Variant(MixVariant::TokenMixer),
        BlockMixer::SelfAttention { wq, wk, wv } => {
            PreparedMixer::Variant(MixVariant::SelfAttention { wq: wq.clone(), wk: wk.clone(), wv: wv.clone() })
        }
        BlockMixer::HeteroAttention { query, key, value } => PreparedMixer::Variant(MixVariant::HeteroAttention {
            query: query.clone(),
            key: key.clone(),
            value: value.clone(),
        }),
        BlockMixer::Fm { y } => PreparedMixer::Variant(MixVariant::Fm { y: y.clone() }),
    })
}

/// Multiply-accumulate counts of one forward pass, by stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MacBreakdown {
    pub tokenizer: u64,
    pub mixing: u64,
    pub swiglu: u64,
    pub norms: u64,
    pub head: u64,
}

impl MacBreakdown {
    pub fn total(&self) -> u64 {
        self.tokenizer + self.mixing + self.swiglu + self.norms + self.head
    }
}

fn mixer_macs(mixer: &BlockMixer, t: u64, d: u64) -> u64 {
    match mixer {
        // attention: three projections, scores, weighted sum
        BlockMixer::SelfAttention { .. } | BlockMixer::HeteroAttention { .. } => 3 * t * d * d + 2 * t * t * d,
        BlockMixer::Fm { .. } => 2 * t * t * d,
        // a fixed permutation moves data without multiplying
        BlockMixer::TokenMixer => 0,
        // counted by the instrumented kernel
        BlockMixer::UniMixing(_) | BlockMixer::Lite(_) => 0,
    }
}

fn block_body(
    u: &[f64],
    block: &BlockParams,
    mixer: &PreparedMixer,
    cfg: &ModelConfig,
    macs: &mut MacBreakdown,
) -> Result<Vector> {
    let (t, big_d, b) = (cfg.tokens(), cfg.token_dim, cfg.block);
    let l = u.len();
    let mixed = match mixer {
        PreparedMixer::Weights(w) => {
            let mut c = MulCounter::default();
            let out = forward_apply(u, w, &mut c)?;
            macs.mixing += c.0;
            out
        }
        PreparedMixer::Variant(v) => {
            macs.mixing += mixer_macs(&block.mixer, t as u64, big_d as u64);
            Vector::new(crate::mixing::unified_mixing(&reshape(u, t, big_d)?, v)?.into_data())
        }
    };
    let r = rms_norm(&Vector::new(u.to_vec()).add(&mixed)?, RMS_EPS)?;
    macs.norms += 2 * l as u64;
    let h = (cfg.expansion * b) as u64;
    macs.swiglu += (l / b) as u64 * (3 * b as u64 * h + 2 * h);
    let y = pertoken_swiglu(&reshape(&r, l / b, b)?, &block.swiglu)?;
    Ok(Vector::new(y.into_data()))
}

/// Single-sample forward returning the logit, at the model's current temperature
/// with fixed-depth Sinkhorn (the same map the training graph differentiates).
pub fn model_forward(features: &DomainFeatures, m: &UniMixerModel) -> Result<f64> {
    Ok(model_forward_counted(features, m)?.0)
}

/// [`model_forward`] plus per-stage multiply-accumulate counts.
pub fn model_forward_counted(features: &DomainFeatures, m: &UniMixerModel) -> Result<(f64, MacBreakdown)> {
    let cfg = &m.config;
    let mut macs = MacBreakdown::default();
    let e = embed(features, &m.tokenizer)?;
    let x = tokenize(&e, &m.tokenizer)?;
    macs.tokenizer += (cfg.tokens() * cfg.chunk * cfg.token_dim) as u64;
    let l = x.len() as u64;
    let mut state = SiameseState::new(Vector::new(x.into_data()));
    for block in &m.blocks {
        let mixer = prepare_mixer(&block.mixer, cfg)?;
        state = siamese_step(&state, |u| block_body(u, block, &mixer, cfg, &mut macs))?;
        // rms(Ȳ) and rms(X̄ + O)
        macs.norms += 4 * l;
    }
    let out = siamese_finalize(&state)?;
    macs.norms += 2 * l;
    macs.head += l;
    Ok((dot(&out, m.head_w.data()) + m.head_b[(0, 0)], macs))
}

/// Siamese streams of one sample after tokenization and after every block.
pub fn block_states(features: &DomainFeatures, m: &UniMixerModel) -> Result<Vec<SiameseState>> {
    let cfg = &m.config;
    let x = tokenize(&embed(features, &m.tokenizer)?, &m.tokenizer)?;
    let mut states = vec![SiameseState::new(Vector::new(x.into_data()))];
    for block in &m.blocks {
        let mixer = prepare_mixer(&block.mixer, cfg)?;
        let next = siamese_step(states.last().unwrap(), |u| {
            block_body(u, block, &mixer, cfg, &mut MacBreakdown::default())
        })?;
        states.push(next);
    }
    Ok(states)
}

/// Analytic multiply-accumulate counts per sample, equal to what
/// [`model_forward_counted`] reports.
pub fn forward_macs(m: &UniMixerModel) -> MacBreakdown {
    let cfg = &m.config;
    let (t, big_d, b) = (cfg.tokens() as u64, cfg.token_dim as u64, cfg.block as u64);
    let l = t * big_d;
    let h = cfg.expansion as u64 * b;
    let mut macs = MacBreakdown { tokenizer: t * cfg.chunk as u64 * big_d, ..Default::default() };
    for block in &m.blocks {
        macs.mixing += match block.mixer {
            BlockMixer::UniMixing(_) | BlockMixer::Lite(_) => l * l / b + l * b,
            ref other => mixer_macs(other, t, big_d),
        };
        macs.swiglu += (l / b) * (3 * b * h + 2 * h);
        macs.norms += 6 * l;
    }
    macs.norms += 2 * l;
    macs.head = l;
    macs
}

/// Batched forward recorded on a [`Graph`].
pub struct ForwardGraph {
    pub graph: Graph,
    /// Leaf node of every parameter, in [`UniMixerModel::visit_params`] order.
    pub params: Vec<NodeId>,
    /// `N × 1` logits.
    pub logits: NodeId,
}

struct Leaves<'a> {
    graph: &'a mut Graph,
    order: Vec<NodeId>,
}

impl Leaves<'_> {
    fn add(&mut self, m: &Matrix) -> NodeId {
        let id = self.graph.leaf(m.clone());
        self.order.push(id);
        id
    }

    fn add_all(&mut self, ms: &[Matrix]) -> Vec<NodeId> {
        ms.iter().map(|m| self.add(m)).collect()
    }
}

fn check_batch(batch: &Batch, cfg: &ModelConfig) -> Result<()> {
    if batch.is_empty() {
        return dim_err("empty batch");
    }
    if batch.dense.cols() != cfg.dense_dim() || batch.categorical.len() != cfg.categorical_fields() {
        return dim_err("batch layout does not match the model's feature fields");
    }
    let cards = cfg.fields.iter().filter_map(|f| match f {
        FieldSpec::Categorical { cardinality, name, .. } => Some((cardinality, name)),
        FieldSpec::Dense { .. } => None,
    });
    for (col, (card, name)) in batch.categorical.iter().zip(cards) {
        if col.len() != batch.len() {
            return dim_err(format!("field '{name}' has {} entries for {} samples", col.len(), batch.len()));
        }
        if let Some(bad) = col.iter().find(|&&v| v >= *card) {
            return Err(Error::Dimension(format!("index {bad} out of range for field '{name}' ({card})")));
        }
    }
    Ok(())
}

/// Records the batched forward pass at temperature `tau`.
pub fn build_graph(m: &UniMixerModel, batch: &Batch, tau: f64) -> Result<ForwardGraph> {
    let cfg = &m.config;
    check_batch(batch, cfg)?;
    let n_samples = batch.len();
    let (t, d, big_d, b) = (cfg.tokens(), cfg.chunk, cfg.token_dim, cfg.block);
    let l = cfg.stream_len();
    let iters = cfg.constraint.max_iters;
    let mut graph = Graph::new();
    let mut lv = Leaves { graph: &mut graph, order: Vec::new() };

    let tables = lv.add_all(&m.tokenizer.tables);
    let proj = lv.add_all(&m.tokenizer.proj);
    let bias = lv.add_all(&m.tokenizer.bias);

    struct BlockNodes {
        mixer: MixerNodes,
        up: Vec<NodeId>,
        gate: Vec<NodeId>,
        down: Vec<NodeId>,
        b_up: Vec<NodeId>,
        b_gate: Vec<NodeId>,
        b_down: Vec<NodeId>,
    }
    enum MixerNodes {
        UniMixing { global: NodeId, local: Vec<NodeId> },
        Lite { a: NodeId, b: NodeId, basis: Vec<NodeId>, omega: NodeId },
        TokenMixer,
        SelfAttention { wq: NodeId, wk: NodeId, wv: NodeId },
        HeteroAttention { query: Vec<NodeId>, key: Vec<NodeId>, value: Vec<NodeId> },
        Fm { y: NodeId },
    }

    let mut block_nodes = Vec::with_capacity(m.blocks.len());
    for block in &m.blocks {
        let mixer = match &block.mixer {
            BlockMixer::UniMixing(p) => {
                let global = lv.add(&p.global_raw);
                MixerNodes::UniMixing { global, local: lv.add_all(&p.local_raw) }
            }
            BlockMixer::Lite(p) => {
                let a = lv.add(&p.a_g);
                let bg = lv.add(&p.b_g);
                let basis = lv.add_all(&p.basis);
                MixerNodes::Lite { a, b: bg, basis, omega: lv.add(&p.omega) }
            }
            BlockMixer::TokenMixer => MixerNodes::TokenMixer,
            BlockMixer::SelfAttention { wq, wk, wv } => {
                MixerNodes::SelfAttention { wq: lv.add(wq), wk: lv.add(wk), wv: lv.add(wv) }
            }
            BlockMixer::HeteroAttention { query, key, value } => MixerNodes::HeteroAttention {
                query: lv.add_all(query),
                key: lv.add_all(key),
                value: lv.add_all(value),
            },
            BlockMixer::Fm { y } => MixerNodes::Fm { y: lv.add(y) },
        };
        let s = &block.swiglu;
        let up = lv.add_all(&s.up);
        let gate = lv.add_all(&s.gate);
        let down = lv.add_all(&s.down);
        let b_up = lv.add_all(&s.b_up);
        let b_gate = lv.add_all(&s.b_gate);
        let b_down = lv.add_all(&s.b_down);
        block_nodes.push(BlockNodes { mixer, up, gate, down, b_up, b_gate, b_down });
    }
    let head_w = lv.add(&m.head_w);
    let head_b = lv.add(&m.head_b);
    let params = lv.order;
    let g = &mut graph;

    // Embedding: concatenate field slices in field order.
    let mut parts = Vec::with_capacity(cfg.fields.len());
    let (mut cat, mut dense_off) = (0, 0);
    for field in &cfg.fields {
        match field {
            FieldSpec::Categorical { .. } => {
                parts.push(g.gather_rows(tables[cat], batch.categorical[cat].clone()));
                cat += 1;
            }
            FieldSpec::Dense { dim, .. } => {
                let vals = Matrix::from_fn(n_samples, *dim, |s, j| batch.dense[(s, dense_off + j)]);
                parts.push(g.leaf(vals));
                dense_off += dim;
            }
        }
    }
    let e = g.concat_cols(&parts);

    // Tokens: x_i = E_i · W_iᵀ + b_i.
    let mut tokens = Vec::with_capacity(t);
    for i in 0..t {
        let chunk = g.slice_cols(e, i * d, d);
        let x = g.batch_matmul(chunk, proj[i], 1, false, true, true);
        tokens.push(g.add_row_bias(x, bias[i]));
    }
    let x0 = g.concat_cols(&tokens);

    let mut x_bar = x0;
    let mut y_bar = x0;
    for nodes in &block_nodes {
        let y_tilde = g.rms_norm_rows(y_bar, RMS_EPS);
        let u = g.add(x_bar, y_tilde);

        let mixed = match &nodes.mixer {
            MixerNodes::UniMixing { global, local } => {
                let gs = g.symmetrize(*global);
                let gw = g.sinkhorn(gs, tau, iters)?;
                let mut ws = Vec::with_capacity(local.len());
                for &w in local {
                    let sym = g.symmetrize(w);
                    ws.push(g.sinkhorn(sym, tau, iters)?);
                }
                let h = g.block_local(u, &ws);
                g.block_global(h, gw, b)
            }
            MixerNodes::Lite { a, b: bg, basis, omega } => {
                let prod = g.matmul(*a, *bg);
                let gw = g.sinkhorn(prod, tau, iters)?;
                let rows: Vec<NodeId> = basis.iter().map(|&z| g.reshape(z, 1, b * b)).collect();
                let stack = g.concat_rows(&rows);
                let combos = g.matmul(*omega, stack);
                let mut ws = Vec::with_capacity(l / b);
                for i in 0..l / b {
                    let row = g.slice_rows(combos, i, 1);
                    let w = g.reshape(row, b, b);
                    ws.push(g.sinkhorn(w, tau, iters)?);
                }
                let h = g.block_local(u, &ws);
                g.block_global(h, gw, b)
            }
            MixerNodes::TokenMixer => {
                let report = verify_perm_properties(PermSpec::new(t, big_d, t))?;
                let gw = g.leaf(report.global);
                g.block_global(u, gw, report.local_size)
            }
            MixerNodes::SelfAttention { wq, wk, wv } => {
                let xs = g.reshape(u, n_samples * t, big_d);
                let q = g.matmul(xs, *wq);
                let k = g.matmul(xs, *wk);
                let v = g.matmul(xs, *wv);
                let out = attention(g, q, k, v, n_samples, big_d);
                g.reshape(out, n_samples, l)
            }
            MixerNodes::HeteroAttention { query, key, value } => {
                let q = g.block_local(u, query);
                let k = g.block_local(u, key);
                let v = g.block_local(u, value);
                let (q, k, v) = (
                    g.reshape(q, n_samples * t, big_d),
                    g.reshape(k, n_samples * t, big_d),
                    g.reshape(v, n_samples * t, big_d),
                );
                let out = attention(g, q, k, v, n_samples, big_d);
                g.reshape(out, n_samples, l)
            }
            MixerNodes::Fm { y } => {
                let xs = g.reshape(u, n_samples * t, big_d);
                let gram = g.batch_matmul(xs, xs, n_samples, false, false, true);
                let out = g.batch_matmul(gram, *y, n_samples, false, true, false);
                g.reshape(out, n_samples, l)
            }
        };
        let pre = g.add(u, mixed);
        let r = g.rms_norm_rows(pre, RMS_EPS);

        let bu = g.concat_cols(&nodes.b_up);
        let bgt = g.concat_cols(&nodes.b_gate);
        let bd = g.concat_cols(&nodes.b_down);
        let up = g.block_local(r, &nodes.up);
        let up = g.add_row_bias(up, bu);
        let gate = g.block_local(r, &nodes.gate);
        let gate = g.add_row_bias(gate, bgt);
        let act = g.swish(gate);
        let z = g.mul(up, act);
        let down = g.block_local(z, &nodes.down);
        let o = g.add_row_bias(down, bd);

        let sum = g.add(x_bar, o);
        x_bar = g.rms_norm_rows(sum, RMS_EPS);
        y_bar = g.add(y_bar, o);
    }
    let y_norm = g.rms_norm_rows(y_bar, RMS_EPS);
    let out = g.add(x_bar, y_norm);
    let z = g.matmul(out, head_w);
    let logits = g.add_row_bias(z, head_b);
    Ok(ForwardGraph { graph, params, logits })
}

/// `softmax(Q_s K_sᵀ / √D) V_s` per sample, on `(N·T) × D` stacks.
fn attention(g: &mut Graph, q: NodeId, k: NodeId, v: NodeId, batch: usize, width: usize) -> NodeId {
    let scores = g.batch_matmul(q, k, batch, false, false, true);
    let scaled = g.scale(scores, 1.0 / (width as f64).sqrt());
    let weights = g.softmax_rows(scaled);
    g.batch_matmul(weights, v, batch, false, false, false)
}

/// Logits for a batch via the graph forward.
pub fn predict_batch(m: &UniMixerModel, batch: &Batch) -> Result<Vec<f64>> {
    let fg = build_graph(m, batch, m.tau())?;
    Ok(fg.graph.value(fg.logits).data().to_vec())
}

//! UniMixing: a learnable, block-factored generalization of the TokenMixer
//! permutation.
//!
//! The flattened input of length `L` is split into `n = L / B` chunks. Chunk
//! `i` is first mixed locally by its own `B × B` matrix, then chunks are mixed
//! globally by an `n × n` matrix:
//!
//! ```text
//! h_i = x_i · W_B^i            (row vector times B×B)
//! out = flatten(W_G · [h_1; …; h_n])
//! ```
//!
//! This costs `L²/B + L·B` multiplications and never builds the `L × L`
//! generalized Kronecker matrix that [`naive_apply`] materializes.
//!
//! UniMixing-Lite replaces `W_G` by a low-rank product `A_G · B_G` and every
//! `W_B^i` by a combination of `b` shared basis matrices.

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::reference::{
    attention_weights, fm, self_attention, tokenwise_project, verify_perm_properties,
    HeteroAttentionParams, PermSpec,
};
use crate::sinkhorn::{project, symmetrize, ConstraintConfig, SinkhornMode};
use crate::tensor::{generalized_kron, matmul, reshape, rms_norm, Matrix, Vector, RMS_EPS};

/// Scalar multiplication counter used to instrument the mixing kernels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MulCounter(pub u64);

impl MulCounter {
    pub fn add(&mut self, n: usize) {
        self.0 += n as u64;
    }
}

/// Learnable weights of a full UniMixing map.
#[derive(Clone, Debug, PartialEq)]
pub struct UniMixingParams {
    pub len: usize,
    pub block: usize,
    /// Raw global weights, `n × n` with `n = len / block`.
    pub global_raw: Matrix,
    /// One raw `block × block` local matrix per chunk.
    pub local_raw: Vec<Matrix>,
    pub constraint: ConstraintConfig,
}

/// Learnable weights of UniMixing-Lite.
#[derive(Clone, Debug, PartialEq)]
pub struct LiteParams {
    pub len: usize,
    pub block: usize,
    /// `n × r` left factor of the low-rank global weights.
    pub a_g: Matrix,
    /// `r × n` right factor.
    pub b_g: Matrix,
    /// `b` shared `block × block` basis matrices.
    pub basis: Vec<Matrix>,
    /// `n × b`: row `i` holds the basis coefficients of chunk `i`.
    pub omega: Matrix,
    pub constraint: ConstraintConfig,
}

/// Constrained (doubly stochastic) weights ready for the forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct MixingWeights {
    pub global: Matrix,
    pub local: Vec<Matrix>,
}

fn check_blocking(len: usize, block: usize) -> Result<usize> {
    if block == 0 || len == 0 || len % block != 0 {
        return Err(Error::Dimension(format!("length {len} is not divisible into blocks of {block}")));
    }
    Ok(len / block)
}

impl UniMixingParams {
    pub fn zeros(len: usize, block: usize, constraint: ConstraintConfig) -> Result<Self> {
        let n = check_blocking(len, block)?;
        Ok(Self {
            len,
            block,
            global_raw: Matrix::zeros(n, n),
            local_raw: vec![Matrix::zeros(block, block); n],
            constraint,
        })
    }

    /// Raw weights drawn from N(0, std²).
    pub fn random<R: Rng + ?Sized>(len: usize, block: usize, std: f64, constraint: ConstraintConfig, rng: &mut R) -> Result<Self> {
        let n = check_blocking(len, block)?;
        Ok(Self {
            len,
            block,
            global_raw: Matrix::random_normal(n, n, std, rng),
            local_raw: (0..n).map(|_| Matrix::random_normal(block, block, std, rng)).collect(),
            constraint,
        })
    }

    pub fn blocks(&self) -> usize {
        self.len / self.block
    }

    pub fn validate(&self) -> Result<()> {
        let n = check_blocking(self.len, self.block)?;
        if self.global_raw.shape() != (n, n) {
            return dim_err(format!("global weights must be {n}x{n}"));
        }
        if self.local_raw.len() != n || self.local_raw.iter().any(|w| w.shape() != (self.block, self.block)) {
            return dim_err(format!("need {n} local matrices of {0}x{0}", self.block));
        }
        self.constraint.validate()
    }

    /// `n² + n·B²`.
    pub fn param_count(&self) -> usize {
        let n = self.blocks();
        n * n + n * self.block * self.block
    }
}

impl LiteParams {
    pub fn random<R: Rng + ?Sized>(
        len: usize,
        block: usize,
        rank: usize,
        basis: usize,
        std: f64,
        constraint: ConstraintConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let n = check_blocking(len, block)?;
        if rank == 0 || basis == 0 {
            return Err(Error::Config("Lite rank and basis count must be at least 1".into()));
        }
        Ok(Self {
            len,
            block,
            a_g: Matrix::random_normal(n, rank, std, rng),
            b_g: Matrix::random_normal(rank, n, std, rng),
            basis: (0..basis).map(|_| Matrix::random_normal(block, block, std, rng)).collect(),
            omega: Matrix::random_normal(n, basis, std, rng),
            constraint,
        })
    }

    pub fn blocks(&self) -> usize {
        self.len / self.block
    }

    pub fn rank(&self) -> usize {
        self.a_g.cols()
    }

    pub fn basis_count(&self) -> usize {
        self.basis.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = check_blocking(self.len, self.block)?;
        let (r, b) = (self.rank(), self.basis_count());
        if r == 0 || b == 0 {
            return Err(Error::Config("Lite rank and basis count must be at least 1".into()));
        }
        if self.a_g.shape() != (n, r) || self.b_g.shape() != (r, n) {
            return dim_err(format!("low-rank factors must be {n}x{r} and {r}x{n}"));
        }
        if self.basis.iter().any(|z| z.shape() != (self.block, self.block)) {
            return dim_err(format!("basis matrices must be {0}x{0}", self.block));
        }
        if self.omega.shape() != (n, b) {
            return dim_err(format!("omega must be {n}x{b}"));
        }
        self.constraint.validate()
    }

    /// `2·r·n + b·B² + b·n`.
    pub fn param_count(&self) -> usize {
        let n = self.blocks();
        let (r, b) = (self.rank(), self.basis_count());
        2 * r * n + b * self.block * self.block + b * n
    }
}

/// Either mixing parameterization.
#[derive(Clone, Debug, PartialEq)]
pub enum MixingParams {
    Full(UniMixingParams),
    Lite(LiteParams),
}

impl MixingParams {
    pub fn len(&self) -> usize {
        match self {
            Self::Full(p) => p.len,
            Self::Lite(p) => p.len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn block(&self) -> usize {
        match self {
            Self::Full(p) => p.block,
            Self::Lite(p) => p.block,
        }
    }

    pub fn constraint(&self) -> ConstraintConfig {
        match self {
            Self::Full(p) => p.constraint,
            Self::Lite(p) => p.constraint,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Self::Full(p) => p.param_count(),
            Self::Lite(p) => p.param_count(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Full(p) => p.validate(),
            Self::Lite(p) => p.validate(),
        }
    }

    /// Materializes the constrained weights at temperature `tau`.
    pub fn materialize(&self, tau: f64, mode: SinkhornMode) -> Result<MixingWeights> {
        match self {
            Self::Full(p) => constrained_weights_with(p, &p.constraint.with_tau(tau), mode),
            Self::Lite(p) => lite_materialize_with(p, &p.constraint.with_tau(tau), mode),
        }
    }
}

/// Symmetrize then Sinkhorn-project every raw matrix (converging mode).
pub fn constrained_weights(p: &UniMixingParams) -> Result<MixingWeights> {
    constrained_weights_with(p, &p.constraint, SinkhornMode::Converge)
}

pub fn constrained_weights_with(p: &UniMixingParams, cfg: &ConstraintConfig, mode: SinkhornMode) -> Result<MixingWeights> {
    p.validate()?;
    let global = project(&symmetrize(&p.global_raw)?, cfg, mode)?;
    let local = p
        .local_raw
        .iter()
        .map(|w| project(&symmetrize(w)?, cfg, mode))
        .collect::<Result<_>>()?;
    Ok(MixingWeights { global, local })
}

/// `W_r = sinkhorn(A_G · B_G)` and `W_B^{*i} = sinkhorn(Σ_ℓ ω_ℓ^i Z_ℓ)`.
/// No symmetrization is applied before projection.
pub fn lite_materialize(p: &LiteParams) -> Result<MixingWeights> {
    lite_materialize_with(p, &p.constraint, SinkhornMode::Converge)
}

pub fn lite_materialize_with(p: &LiteParams, cfg: &ConstraintConfig, mode: SinkhornMode) -> Result<MixingWeights> {
    p.validate()?;
    let global = project(&matmul(&p.a_g, &p.b_g)?, cfg, mode)?;
    let local = (0..p.blocks())
        .map(|i| project(&basis_combination(p, i), cfg, mode))
        .collect::<Result<_>>()?;
    Ok(MixingWeights { global, local })
}

/// `Σ_ℓ omega[(i, ℓ)] · basis[ℓ]`.
pub fn basis_combination(p: &LiteParams, i: usize) -> Matrix {
    let mut acc = Matrix::zeros(p.block, p.block);
    for (l, z) in p.basis.iter().enumerate() {
        let w = p.omega[(i, l)];
        for (a, v) in acc.data_mut().iter_mut().zip(z.data()) {
            *a += w * v;
        }
    }
    acc
}

impl MixingWeights {
    pub fn blocks(&self) -> usize {
        self.global.rows()
    }

    pub fn block(&self) -> usize {
        self.local.first().map_or(0, Matrix::rows)
    }

    pub fn len(&self) -> usize {
        self.blocks() * self.block()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.len() {
            return dim_err(format!("input length {} != mixing length {}", x.len(), self.len()));
        }
        Ok(())
    }

    /// The `L × L` matrix the optimized pipeline applies implicitly. Local
    /// blocks enter transposed because the pipeline multiplies chunks as row
    /// vectors; for symmetric blocks this is exactly
    /// `generalized_kron(global, local)`.
    pub fn dense_map(&self) -> Result<Matrix> {
        let transposed: Vec<Matrix> = self.local.iter().map(Matrix::transpose).collect();
        generalized_kron(&self.global, &transposed)
    }
}

/// Materialize the full map and apply it: `L²` multiplications.
pub fn naive_apply(x: &[f64], w: &MixingWeights, counter: &mut MulCounter) -> Result<Vector> {
    w.check_input(x)?;
    let m = w.dense_map()?;
    counter.add(m.rows() * m.cols());
    m.matvec(x)
}

/// Split, mix locally, mix globally: `L²/B + L·B` multiplications.
pub fn forward_apply(x: &[f64], w: &MixingWeights, counter: &mut MulCounter) -> Result<Vector> {
    w.check_input(x)?;
    let (n, b) = (w.blocks(), w.block());
    let mut h = vec![0.0; n * b];
    for (i, (chunk, local)) in x.chunks(b).zip(&w.local).enumerate() {
        let out = &mut h[i * b..(i + 1) * b];
        for (k, &xk) in chunk.iter().enumerate() {
            for (o, &v) in out.iter_mut().zip(local.row(k)) {
                *o += xk * v;
            }
        }
    }
    counter.add(n * b * b);

    let mut out = vec![0.0; n * b];
    for i in 0..n {
        let dst = &mut out[i * b..(i + 1) * b];
        for j in 0..n {
            let g = w.global[(i, j)];
            for (o, &v) in dst.iter_mut().zip(&h[j * b..(j + 1) * b]) {
                *o += g * v;
            }
        }
    }
    counter.add(n * n * b);
    Ok(Vector::new(out))
}

pub fn unimixing_naive(x: &[f64], p: &UniMixingParams) -> Result<(Vector, MulCounter)> {
    let mut c = MulCounter::default();
    let out = naive_apply(x, &constrained_weights(p)?, &mut c)?;
    Ok((out, c))
}

pub fn unimixing_forward(x: &[f64], p: &UniMixingParams) -> Result<(Vector, MulCounter)> {
    let mut c = MulCounter::default();
    let out = forward_apply(x, &constrained_weights(p)?, &mut c)?;
    Ok((out, c))
}

/// Applies [`forward_apply`] to every sample of a batch; the counter reports the per-sample cost.
pub fn forward_batch(xs: &[Vector], w: &MixingWeights) -> Result<(Vec<Vector>, MulCounter)> {
    let mut per_sample = MulCounter::default();
    let mut out = Vec::with_capacity(xs.len());
    for (k, x) in xs.iter().enumerate() {
        let mut c = MulCounter::default();
        out.push(forward_apply(x, w, &mut c)?);
        if k == 0 {
            per_sample = c;
        }
    }
    Ok((out, per_sample))
}

/// `rms_norm(x + mix(x))`.
pub fn residual_block(x: &[f64], w: &MixingWeights) -> Result<Vector> {
    let mixed = forward_apply(x, w, &mut MulCounter::default())?;
    rms_norm(&Vector::new(x.to_vec()).add(&mixed)?, RMS_EPS)
}

pub fn unimixing_block(x: &[f64], p: &UniMixingParams) -> Result<Vector> {
    residual_block(x, &constrained_weights(p)?)
}

pub fn unimixing_lite_forward(x: &[f64], p: &LiteParams) -> Result<(Vector, MulCounter)> {
    let mut c = MulCounter::default();
    let out = forward_apply(x, &lite_materialize(p)?, &mut c)?;
    Ok((out, c))
}

pub fn unimixing_lite_block(x: &[f64], p: &LiteParams) -> Result<Vector> {
    residual_block(x, &lite_materialize(p)?)
}

/// A mixing paradigm expressed as global pattern times local pattern.
#[derive(Clone, Debug)]
pub enum MixVariant {
    SelfAttention { wq: Matrix, wk: Matrix, wv: Matrix },
    /// Single-head heterogeneous attention; the output projection is not part of the mixing.
    HeteroAttention { query: Vec<Matrix>, key: Vec<Matrix>, value: Vec<Matrix> },
    /// Rule-based TokenMixer with `H = T`.
    TokenMixer,
    /// `x xᵀ · y`.
    Fm { y: Matrix },
    UniMixing(UniMixingParams),
    UniMixingLite(LiteParams),
}

impl MixVariant {
    pub fn name(&self) -> &'static str {
        match self {
            Self::SelfAttention { .. } => "self-attn",
            Self::HeteroAttention { .. } => "hetero-attn",
            Self::TokenMixer => "tokenmixer",
            Self::Fm { .. } => "fm",
            Self::UniMixing(_) => "unimixing",
            Self::UniMixingLite(_) => "unimixing-lite",
        }
    }
}

/// Computes `G(x) · Local(x)` for the chosen paradigm, with `x` laid out as
/// `T × D`. Learned variants treat `flatten(x)` as the `L`-vector.
pub fn unified_mixing(x: &Matrix, v: &MixVariant) -> Result<Matrix> {
    let (t, d) = x.shape();
    match v {
        MixVariant::SelfAttention { wq, wk, wv } => {
            let g = attention_weights(&matmul(x, wq)?, &matmul(x, wk)?)?;
            matmul(&g, &matmul(x, wv)?)
        }
        MixVariant::HeteroAttention { query, key, value } => {
            if query.len() != t || key.len() != t || value.len() != t {
                return Err(Error::Config(format!("hetero-attention weights must cover {t} tokens")));
            }
            let q = tokenwise_project(x, &query.iter().collect::<Vec<_>>())?;
            let k = tokenwise_project(x, &key.iter().collect::<Vec<_>>())?;
            let local = tokenwise_project(x, &value.iter().collect::<Vec<_>>())?;
            matmul(&attention_weights(&q, &k)?, &local)
        }
        MixVariant::TokenMixer => {
            let report = verify_perm_properties(PermSpec::new(t, d, t))?;
            let k = report.local_size;
            let chunks = reshape(x.data(), t * t, k)?;
            let mixed = matmul(&report.global, &chunks)?;
            reshape(mixed.data(), t, d)
        }
        MixVariant::Fm { y } => {
            if y.rows() != t {
                return Err(Error::Config(format!("FM projection needs {t} rows, has {}", y.rows())));
            }
            let g = matmul(x, &x.transpose())?;
            matmul(&g, y)
        }
        MixVariant::UniMixing(p) => {
            let (out, _) = unimixing_forward(x.data(), p)?;
            reshape(&out, t, d)
        }
        MixVariant::UniMixingLite(p) => {
            let (out, _) = unimixing_lite_forward(x.data(), p)?;
            reshape(&out, t, d)
        }
    }
}

/// Local projection `[x_1 W_B^1; …; x_T W_B^T]` of UniMixing with `L/B = T`
/// and `B = D`.
pub fn local_projection(x: &Matrix, local: &[Matrix]) -> Result<Matrix> {
    let (t, d) = x.shape();
    if local.len() != t || local.iter().any(|w| w.shape() != (d, d)) {
        return Err(Error::Config(format!(
            "value-projection equivalence needs {t} local blocks of {d}x{d}"
        )));
    }
    let mut out = Matrix::zeros(t, d);
    for (i, w) in local.iter().enumerate() {
        for k in 0..d {
            let xk = x[(i, k)];
            for (o, &v) in out.row_mut(i).iter_mut().zip(w.row(k)) {
                *o += xk * v;
            }
        }
    }
    Ok(out)
}

/// Does UniMixing's local projection coincide with the token-specific value
/// projection `V` when `W_V^i = W_B^i`? Compared entrywise within `1e-12`.
pub fn check_value_projection_equivalence(x: &Matrix, local: &[Matrix], value: &[Matrix]) -> Result<bool> {
    let h = local_projection(x, local)?;
    if value.len() != x.rows() {
        return Err(Error::Config(format!("need {} value projections", x.rows())));
    }
    let v = tokenwise_project(x, &value.iter().collect::<Vec<_>>())?;
    Ok(h.shape() == v.shape() && h.data().iter().zip(v.data()).all(|(a, b)| (a - b).abs() <= 1e-12))
}

/// Outcome of the attention-to-FM degeneracy check.
#[derive(Clone, Debug)]
pub struct DegeneracyReport {
    /// `(x I)(x I)ᵀ y == x xᵀ y` bit-for-bit with softmax removed.
    pub algebraic_match: bool,
    /// `max |softmax((x I)(x I)ᵀ / √d) y − x xᵀ y|`; measured, never asserted.
    pub softmax_gap: f64,
}

impl DegeneracyReport {
    pub fn holds(&self) -> bool {
        self.algebraic_match
    }
}

/// With `W_Q = W_K = I` and an input-independent value matrix `y`, attention
/// without softmax reduces to the FM interaction `x xᵀ y`.
pub fn check_attention_fm_degeneracy(x: &Matrix, y: &Matrix) -> Result<DegeneracyReport> {
    let eye = Matrix::identity(x.cols());
    let q = matmul(x, &eye)?;
    let k = matmul(x, &eye)?;
    let raw = matmul(&matmul(&q, &k.transpose())?, y)?;
    let target = fm(x, y)?;
    let with_softmax = matmul(&attention_weights(&q, &k)?, y)?;
    let softmax_gap = with_softmax.sub(&target)?.max_abs();
    Ok(DegeneracyReport { algebraic_match: raw == target, softmax_gap })
}

/// Reference self-attention re-exported under the unified naming.
pub fn reference_self_attention(x: &Matrix, wq: &Matrix, wk: &Matrix, wv: &Matrix) -> Result<Matrix> {
    self_attention(x, wq, wk, wv)
}

/// Single-head hetero-attention parameters with identity output projection,
/// for comparing the unified dispatcher against the reference layer.
pub fn single_head_reference(query: &[Matrix], key: &[Matrix], value: &[Matrix]) -> HeteroAttentionParams {
    let wrap = |w: &[Matrix]| w.iter().map(|m| vec![m.clone()]).collect();
    let d = value.first().map_or(0, Matrix::cols);
    HeteroAttentionParams { query: wrap(query), key: wrap(key), value: wrap(value), output: Matrix::identity(d) }
}

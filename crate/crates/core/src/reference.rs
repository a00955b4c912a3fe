//! Reference implementations of the three baseline mixing paradigms
//! (heterogeneous attention, rule-based TokenMixer, Wukong FM) and the
//! permutation-matrix view of TokenMixer.

use crate::error::{dim_err, Error, Result};
use crate::tensor::{kron, matmul, rms_norm, softmax_rows, swish_scalar, Matrix, RMS_EPS};

/// Shape of a TokenMixer permutation: `T` tokens of width `D`, each split into `H` heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PermSpec {
    pub tokens: usize,
    pub dim: usize,
    pub heads: usize,
}

impl PermSpec {
    pub fn new(tokens: usize, dim: usize, heads: usize) -> Self {
        Self { tokens, dim, heads }
    }

    fn head_width(&self) -> Result<usize> {
        if self.tokens == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return dim_err(format!(
                "token dim {} is not divisible into {} heads",
                self.dim, self.heads
            ));
        }
        Ok(self.dim / self.heads)
    }

    /// Total entries `T·D`.
    pub fn len(&self) -> usize {
        self.tokens * self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat index in `flatten(x)` that lands at flat output position `out`.
    fn source_index(&self, out: usize, head_width: usize) -> usize {
        let row_len = self.tokens * head_width;
        let (h, rest) = (out / row_len, out % row_len);
        let (t, e) = (rest / head_width, rest % head_width);
        t * self.dim + h * head_width + e
    }
}

/// Rule-based TokenMixer with the `H == T` constraint enforced.
pub fn token_mixer(x: &Matrix, spec: PermSpec) -> Result<Matrix> {
    if spec.heads != spec.tokens {
        return Err(Error::Constraint(format!(
            "TokenMixer requires H == T, got H = {} and T = {}",
            spec.heads, spec.tokens
        )));
    }
    token_mixer_general(x, spec)
}

/// TokenMixer head regrouping for any `H` dividing `D`: row `h` of the output
/// is the concatenation over tokens of each token's `h`-th head slice, giving
/// an `H × (T·D/H)` result.
pub fn token_mixer_general(x: &Matrix, spec: PermSpec) -> Result<Matrix> {
    let k = spec.head_width()?;
    if x.shape() != (spec.tokens, spec.dim) {
        return dim_err(format!(
            "input is {}x{}, spec expects {}x{}",
            x.rows(),
            x.cols(),
            spec.tokens,
            spec.dim
        ));
    }
    let row_len = spec.tokens * k;
    let data = (0..spec.len()).map(|out| x.data()[spec.source_index(out, k)]).collect();
    Matrix::new(spec.heads, row_len, data)
}

/// The `TD × TD` 0/1 matrix `P` with `reshape(P · flatten(x)) == token_mixer_general(x)`.
pub fn build_perm_matrix(spec: PermSpec) -> Result<Matrix> {
    let k = spec.head_width()?;
    let n = spec.len();
    let mut p = Matrix::zeros(n, n);
    for out in 0..n {
        p[(out, spec.source_index(out, k))] = 1.0;
    }
    Ok(p)
}

/// Result of checking the structural properties of a TokenMixer permutation matrix.
#[derive(Clone, Debug)]
pub struct PropertyReport {
    /// `P == G ⊗ I_{D/H}` for the recovered global matrix.
    pub compressible: bool,
    pub doubly_stochastic: bool,
    pub one_nonzero_per_row_and_col: bool,
    pub symmetric: bool,
    /// Global mixing matrix recovered from the block structure of `P`.
    pub global: Matrix,
    /// Side of the identity factor, `D/H`.
    pub local_size: usize,
}

impl PropertyReport {
    pub fn all_hold(&self) -> bool {
        self.compressible && self.doubly_stochastic && self.one_nonzero_per_row_and_col && self.symmetric
    }
}

pub fn verify_perm_properties(spec: PermSpec) -> Result<PropertyReport> {
    let p = build_perm_matrix(spec)?;
    let k = spec.head_width()?;
    let n = p.rows();
    let chunks = n / k;

    // G is read off the top-left entry of every k×k block.
    let global = Matrix::from_fn(chunks, chunks, |i, j| p[(i * k, j * k)]);
    let compressible = kron(&global, &Matrix::identity(k)) == p;

    let doubly_stochastic =
        p.row_sums().iter().chain(p.col_sums().iter()).all(|&s| s == 1.0);

    let row_nz = (0..n).all(|i| p.row(i).iter().filter(|&&v| v != 0.0).count() == 1);
    let col_nz = (0..n).all(|j| (0..n).filter(|&i| p[(i, j)] != 0.0).count() == 1);

    Ok(PropertyReport {
        compressible,
        doubly_stochastic,
        one_nonzero_per_row_and_col: row_nz && col_nz,
        symmetric: p == p.transpose(),
        global,
        local_size: k,
    })
}

/// Token-specific projection weights of a heterogeneous attention layer.
///
/// `query[t][h]`, `key[t][h]` and `value[t][h]` are `D × d`; `output` is `(heads·d) × D`.
#[derive(Clone, Debug)]
pub struct HeteroAttentionParams {
    pub query: Vec<Vec<Matrix>>,
    pub key: Vec<Vec<Matrix>>,
    pub value: Vec<Vec<Matrix>>,
    pub output: Matrix,
}

impl HeteroAttentionParams {
    pub fn heads(&self) -> usize {
        self.query.first().map_or(0, Vec::len)
    }

    fn check(&self, x: &Matrix) -> Result<usize> {
        let t = x.rows();
        let heads = self.heads();
        if [&self.query, &self.key, &self.value].iter().any(|w| w.len() != t || w.iter().any(|ws| ws.len() != heads)) {
            return dim_err(format!("attention weights do not cover {t} tokens x {heads} heads"));
        }
        let d = self.value[0][0].cols();
        for w in self.query.iter().chain(&self.key).chain(&self.value).flatten() {
            if w.shape() != (x.cols(), d) {
                return dim_err(format!(
                    "projection is {}x{}, expected {}x{d}",
                    w.rows(),
                    w.cols(),
                    x.cols()
                ));
            }
        }
        if self.output.shape() != (heads * d, x.cols()) {
            return dim_err(format!(
                "output projection is {}x{}, expected {}x{}",
                self.output.rows(),
                self.output.cols(),
                heads * d,
                x.cols()
            ));
        }
        Ok(d)
    }
}

/// Stacks `x_t · w[t]` for every token `t`.
pub fn tokenwise_project(x: &Matrix, weights: &[&Matrix]) -> Result<Matrix> {
    let mut rows = Vec::with_capacity(x.rows());
    for (t, w) in weights.iter().enumerate() {
        let row = Matrix::new(1, x.cols(), x.row(t).to_vec())?;
        rows.push(matmul(&row, w)?.into_data());
    }
    Matrix::from_rows(&rows)
}

fn head_slice(w: &[Vec<Matrix>], h: usize) -> Vec<&Matrix> {
    w.iter().map(|ws| &ws[h]).collect()
}

/// `softmax(q kᵀ / √d)` with `d = q.cols()`.
pub fn attention_weights(q: &Matrix, k: &Matrix) -> Result<Matrix> {
    let d = q.cols() as f64;
    let logits = matmul(q, &k.transpose())?.scale(1.0 / d.sqrt());
    softmax_rows(&logits)
}

/// Multi-head attention with token-specific Q/K/V projections followed by an
/// output projection back to `T × D`.
pub fn hetero_attention(x: &Matrix, p: &HeteroAttentionParams) -> Result<Matrix> {
    let d = p.check(x)?;
    let t = x.rows();
    let heads = p.heads();
    let mut concat = Matrix::zeros(t, heads * d);
    for h in 0..heads {
        let q = tokenwise_project(x, &head_slice(&p.query, h))?;
        let k = tokenwise_project(x, &head_slice(&p.key, h))?;
        let v = tokenwise_project(x, &head_slice(&p.value, h))?;
        let o = matmul(&attention_weights(&q, &k)?, &v)?;
        for i in 0..t {
            concat.row_mut(i)[h * d..(h + 1) * d].copy_from_slice(o.row(i));
        }
    }
    matmul(&concat, &p.output)
}

/// Single-head self-attention with shared projections:
/// `softmax((x Wq)(x Wk)ᵀ / √d) · x Wv`.
pub fn self_attention(x: &Matrix, wq: &Matrix, wk: &Matrix, wv: &Matrix) -> Result<Matrix> {
    let q = matmul(x, wq)?;
    let k = matmul(x, wk)?;
    let v = matmul(x, wv)?;
    if q.cols() != k.cols() {
        return dim_err(format!("query width {} != key width {}", q.cols(), k.cols()));
    }
    matmul(&attention_weights(&q, &k)?, &v)
}

/// Factorization-machine interaction core `x xᵀ y`.
pub fn fm(x: &Matrix, y: &Matrix) -> Result<Matrix> {
    matmul(&matmul(x, &x.transpose())?, y)
}

/// One-hidden-layer MLP with Swish activation, row-vector convention.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl Mlp {
    pub fn forward(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.b1.len() != self.w1.cols() || self.b2.len() != self.w2.cols() || self.w1.cols() != self.w2.rows() {
            return dim_err("inconsistent MLP weight shapes");
        }
        let x = Matrix::new(1, v.len(), v.to_vec())?;
        let mut h = matmul(&x, &self.w1)?;
        for (hv, b) in h.data_mut().iter_mut().zip(&self.b1) {
            *hv = swish_scalar(*hv + b);
        }
        let mut out = matmul(&h, &self.w2)?;
        for (o, b) in out.data_mut().iter_mut().zip(&self.b2) {
            *o += b;
        }
        Ok(out.into_data())
    }
}

/// Wukong layer weights: FM projection `y` (`T × r`), the FMB MLP, and the
/// linear compression `lcb` (`n_lcb × T`).
#[derive(Clone, Debug)]
pub struct WukongParams {
    pub y: Matrix,
    pub mlp: Mlp,
    pub lcb: Matrix,
    /// Number of output tokens produced by the FMB branch.
    pub fmb_tokens: usize,
}

/// `[FMB(x); LCB(x)]` stacked along the token axis.
pub fn wukong_layer(x: &Matrix, p: &WukongParams) -> Result<Matrix> {
    let (t, d) = x.shape();
    if p.y.rows() != t || p.lcb.cols() != t {
        return dim_err(format!(
            "Wukong weights expect {} tokens, input has {t}",
            p.y.rows()
        ));
    }
    let interaction = fm(x, &p.y)?;
    let normed = rms_norm(interaction.data(), RMS_EPS)?;
    let fmb = p.mlp.forward(&normed)?;
    if fmb.len() != p.fmb_tokens * d {
        return dim_err(format!(
            "FMB MLP emits {} values, expected {} tokens of width {d}",
            fmb.len(),
            p.fmb_tokens
        ));
    }
    let lcb = matmul(&p.lcb, x)?;
    let mut data = fmb;
    data.extend_from_slice(lcb.data());
    Matrix::new(p.fmb_tokens + p.lcb.rows(), d, data)
}

//! Self-check suite behind `unimixer verify`: the TokenMixer worked example,
//! permutation-matrix properties, pipeline equivalence, multiply counts,
//! Sinkhorn constraints, unified-framework degeneracies, gradient checks and
//! SiameseNorm behaviour.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::mixing::{
    check_attention_fm_degeneracy, check_value_projection_equivalence, unified_mixing, unimixing_forward,
    unimixing_lite_forward, unimixing_naive, LiteParams, MixVariant, UniMixingParams,
};
use crate::model::{
    block_states, siamese_step, Batch, DomainFeatures, FieldSpec, ModelConfig, SiameseState, UniMixerModel, Variant,
};
use crate::reference::{
    build_perm_matrix, fm, hetero_attention, self_attention, token_mixer, verify_perm_properties, PermSpec,
};
use crate::sinkhorn::{sinkhorn_knopp, sparsity_stats, stochastic_deviation, symmetrize, ConstraintConfig};
use crate::tensor::{flatten_row_major, kron, reshape, rms_norm, Matrix, Vector, RMS_EPS};
use crate::train::{finite_diff_grad_check, GradCheckConfig};

#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

#[derive(Clone, Debug, Default)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

type Outcome = Result<(bool, String)>;

fn timed(name: &'static str, f: impl FnOnce() -> Outcome) -> Check {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    Check { name, passed, detail, elapsed: start.elapsed() }
}

/// Runs every check; `seed` drives all randomized trials.
pub fn run_all(seed: u64) -> VerifyReport {
    run_selected(seed, |_| true)
}

pub const CHECK_NAMES: [&str; 8] = [
    "tokenmixer-fixture",
    "perm-properties",
    "pipeline-equivalence",
    "multiply-counts",
    "sinkhorn",
    "degeneracies",
    "gradients",
    "siamese-norm",
];

/// Runs the checks whose names satisfy `keep`.
pub fn run_selected(seed: u64, keep: impl Fn(&str) -> bool) -> VerifyReport {
    let all: [(&'static str, fn(u64) -> Outcome); 8] = [
        ("tokenmixer-fixture", tokenmixer_fixture),
        ("perm-properties", perm_properties),
        ("pipeline-equivalence", pipeline_equivalence),
        ("multiply-counts", multiply_counts),
        ("sinkhorn", sinkhorn_constraints),
        ("degeneracies", degeneracies),
        ("gradients", gradients),
        ("siamese-norm", siamese_norm),
    ];
    let checks = all.into_iter().filter(|(n, _)| keep(n)).map(|(n, f)| timed(n, || f(seed))).collect();
    VerifyReport { checks }
}

/// Worked example: `x = [[1..6], [7..12]]` with `T = H = 2`.
pub fn tokenmixer_fixture(seed: u64) -> Outcome {
    let spec = PermSpec::new(2, 6, 2);
    let x = Matrix::from_fn(2, 6, |i, j| (i * 6 + j + 1) as f64);
    let want = Matrix::from_rows(&[[1.0, 2.0, 3.0, 7.0, 8.0, 9.0], [4.0, 5.0, 6.0, 10.0, 11.0, 12.0]])?;
    let mixed_ok = token_mixer(&x, spec)? == want;

    let p = build_perm_matrix(spec)?;
    let cols = [0, 1, 2, 6, 7, 8, 3, 4, 5, 9, 10, 11];
    let perm_ok = Matrix::from_fn(12, 12, |r, c| f64::from(u8::from(cols[r] == c))) == p;
    let g = Matrix::from_rows(&[[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0]])?;
    let kron_ok = kron(&g, &Matrix::identity(3)) == p && verify_perm_properties(spec)?.global == g;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trials_ok = 0;
    for trial in 0..100 {
        let t = [2, 4, 8][trial % 3];
        let d = t * rng.gen_range(1..=3);
        let spec = PermSpec::new(t, d, t);
        let x = Matrix::random_normal(t, d, 1.0, &mut rng);
        let direct = token_mixer(&x, spec)?;
        let via_p = build_perm_matrix(spec)?.matvec(flatten_row_major(&x).as_slice())?;
        trials_ok += usize::from(via_p == flatten_row_major(&direct));
    }
    Ok((
        mixed_ok && perm_ok && kron_ok && trials_ok == 100,
        format!("output {mixed_ok}, P {perm_ok}, G⊗I₃ {kron_ok}, random trials {trials_ok}/100 exact"),
    ))
}

/// Structure of `P` for every `(T, D, H)` with `T ≤ 6`, `D ∈ {6, 8, 12, 24}`, `H | D`.
pub fn perm_properties(_seed: u64) -> Outcome {
    let (mut specs, mut bad) = (0, Vec::new());
    for t in 1..=6 {
        for d in [6, 8, 12, 24] {
            for h in (1..=d).filter(|h| d % h == 0) {
                let r = verify_perm_properties(PermSpec::new(t, d, h))?;
                // T = 1 or H = 1 makes P the identity
                let want_sym = t == h || t == 1 || h == 1;
                if !(r.doubly_stochastic && r.one_nonzero_per_row_and_col && r.compressible && r.symmetric == want_sym) {
                    bad.push(format!("(T={t}, D={d}, H={h})"));
                }
                specs += 1;
            }
        }
    }
    Ok((bad.is_empty(), format!("{specs} specs, failures: [{}]", bad.join(", "))))
}

fn rel_sup(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    diff / b.iter().fold(0.0f64, |m, y| m.max(y.abs())).max(f64::MIN_POSITIVE)
}

/// Optimized pipeline against the dense generalized-Kronecker map.
pub fn pipeline_equivalence(seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for l in [12, 24, 48] {
        for b in [2, 3, 4, 6] {
            for _ in 0..50 {
                let p = UniMixingParams::random(l, b, 1.0, ConstraintConfig::default(), &mut rng)?;
                let x: Vec<f64> = (0..l).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let (fast, _) = unimixing_forward(&x, &p)?;
                let (naive, _) = unimixing_naive(&x, &p)?;
                worst = worst.max(rel_sup(fast.as_slice(), naive.as_slice()));
                cases += 1;
            }
        }
    }
    Ok((worst <= 1e-12, format!("{cases} trials, worst relative sup-norm error {worst:.3e}")))
}

/// Multiply counters against `L²` and `L²/B + LB`.
pub fn multiply_counts(seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ok = true;
    let mut at_768 = (0, 0);
    for (l, b) in [(12, 2), (12, 3), (24, 4), (48, 6), (96, 8), (768, 6)] {
        let p = UniMixingParams::random(l, b, 0.1, ConstraintConfig::default(), &mut rng)?;
        let x = vec![1.0; l];
        let (_, fast) = unimixing_forward(&x, &p)?;
        let (_, naive) = unimixing_naive(&x, &p)?;
        let (l64, b64) = (l as u64, b as u64);
        ok &= naive.0 == l64 * l64 && fast.0 == l64 * l64 / b64 + l64 * b64;
        if l == 768 {
            at_768 = (naive.0, fast.0);
        }
    }
    ok &= at_768 == (589_824, 102_912);
    Ok((ok, format!("L=768, B=6: naive {}, optimized {}", at_768.0, at_768.1)))
}

pub fn sinkhorn_constraints(seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ConstraintConfig { tau: 1.0, max_iters: 100, tol: 1e-6 };
    let mut worst_sum = 0.0f64;
    let mut worst_sym = 0.0f64;
    for n in [4, 8, 16, 32, 64, 128] {
        let w = Matrix::random_normal(n, n, 1.0, &mut rng);
        worst_sum = worst_sum.max(stochastic_deviation(&sinkhorn_knopp(&w, &cfg)?.matrix));
        let s = sinkhorn_knopp(&symmetrize(&w)?, &cfg)?.matrix;
        worst_sym = worst_sym.max(s.sub(&s.transpose())?.max_abs());
    }
    let w = Matrix::random_normal(16, 16, 0.1, &mut rng);
    let entropy = |tau: f64| -> Result<f64> {
        Ok(sparsity_stats(&sinkhorn_knopp(&w, &cfg.with_tau(tau))?.matrix)?.row_entropy_mean)
    };
    let (cold, hot) = (entropy(0.05)?, entropy(1.0)?);
    Ok((
        worst_sum <= 1e-6 && worst_sym <= 1e-10 && cold < hot,
        format!("max |sum-1| {worst_sum:.2e}, max asymmetry {worst_sym:.2e}, entropy τ=0.05 {cold:.4} vs τ=1 {hot:.4}"),
    ))
}

pub fn degeneracies(seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t, d) = (4, 4);
    let x = Matrix::random_normal(t, d, 1.0, &mut rng);
    let blocks: Vec<Matrix> = (0..t).map(|_| Matrix::random_normal(d, d, 0.5, &mut rng)).collect();
    let value_ok = check_value_projection_equivalence(&x, &blocks, &blocks)?;
    let y = Matrix::random_normal(t, d, 1.0, &mut rng);
    let fm_ok = check_attention_fm_degeneracy(&x, &y)?.holds();

    let mut worst = 0.0f64;
    let mut cmp = |a: &Matrix, b: &Matrix| worst = worst.max(rel_sup(a.data(), b.data()));
    let w = |rng: &mut ChaCha8Rng| Matrix::random_normal(d, d, 0.5, rng);
    let (wq, wk, wv) = (w(&mut rng), w(&mut rng), w(&mut rng));
    cmp(
        &unified_mixing(&x, &MixVariant::SelfAttention { wq: wq.clone(), wk: wk.clone(), wv: wv.clone() })?,
        &self_attention(&x, &wq, &wk, &wv)?,
    );
    let q: Vec<Matrix> = (0..t).map(|_| w(&mut rng)).collect();
    let k: Vec<Matrix> = (0..t).map(|_| w(&mut rng)).collect();
    let hetero = MixVariant::HeteroAttention { query: q.clone(), key: k.clone(), value: blocks.clone() };
    cmp(
        &unified_mixing(&x, &hetero)?,
        &hetero_attention(&x, &crate::mixing::single_head_reference(&q, &k, &blocks))?,
    );
    cmp(&unified_mixing(&x, &MixVariant::TokenMixer)?, &token_mixer(&x, PermSpec::new(t, d, t))?);
    cmp(&unified_mixing(&x, &MixVariant::Fm { y: y.clone() })?, &fm(&x, &y)?);
    let p = UniMixingParams::random(t * d, 4, 1.0, ConstraintConfig::default(), &mut rng)?;
    cmp(&unified_mixing(&x, &MixVariant::UniMixing(p.clone()))?, &reshape(unimixing_naive(x.data(), &p)?.0.as_slice(), t, d)?);
    let lite = LiteParams::random(t * d, 4, 2, 2, 1.0, ConstraintConfig::default(), &mut rng)?;
    cmp(
        &unified_mixing(&x, &MixVariant::UniMixingLite(lite.clone()))?,
        &reshape(unimixing_lite_forward(x.data(), &lite)?.0.as_slice(), t, d)?,
    );
    Ok((
        value_ok && fm_ok && worst <= 1e-12,
        format!("value projection {value_ok}, attention→FM {fm_ok}, dispatcher worst {worst:.2e}"),
    ))
}

fn lite_model(num_blocks: usize, seed: u64) -> Result<UniMixerModel> {
    // 4 fields of width 8 in chunks of 8 → T = 4 tokens of D = 12, L = 48
    let cfg = ModelConfig {
        fields: (0..4).map(|k| FieldSpec::Categorical { name: format!("f{k}"), cardinality: 6, embed_dim: 8 }).collect(),
        chunk: 8,
        token_dim: 12,
        block: 4,
        num_blocks,
        expansion: 2,
        variant: Variant::UniMixingLite,
        rank: 4,
        basis: 2,
        constraint: ConstraintConfig { tau: 1.0, max_iters: 20, tol: 1e-6 },
    };
    UniMixerModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn random_batch(n: usize, fields: usize, card: usize, rng: &mut ChaCha8Rng) -> (Batch, Vec<f64>) {
    let categorical = (0..fields).map(|_| (0..n).map(|_| rng.gen_range(0..card)).collect()).collect();
    let labels = (0..n).map(|_| f64::from(u8::from(rng.gen_bool(0.5)))).collect();
    (Batch { categorical, dense: Matrix::zeros(n, 0) }, labels)
}

/// Central differences on a 2-block UniMixing-Lite model (`L = 48`, `B = 4`,
/// `r = 4`, `b = 2`) at three temperatures.
pub fn gradients(seed: u64) -> Outcome {
    let model = lite_model(2, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let (batch, labels) = random_batch(8, 4, 6, &mut rng);
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for tau in [1.0, 0.3, 0.05] {
        let cfg = GradCheckConfig { seed, ..Default::default() };
        let r = finite_diff_grad_check(&model, &batch, &labels, tau, &cfg)?;
        worst = worst.max(r.max_rel_error);
        parts.push(format!("τ={tau}: {} probes, max rel err {:.2e}", r.checked, r.max_rel_error));
    }
    Ok((worst <= 1e-4, parts.join("; ")))
}

pub fn siamese_norm(seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Vector::new((0..48).map(|_| rng.gen_range(-3.0..3.0)).collect());
    let y = Vector::new((0..48).map(|_| rng.gen_range(-3.0..3.0)).collect());
    let state = SiameseState { x_bar: x.clone(), y_bar: y.clone() };
    let next = siamese_step(&state, |u| Ok(Vector::zeros(u.len())))?;
    let zero_ok = next.x_bar == rms_norm(&x, RMS_EPS)? && next.y_bar == y;

    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for s in 0..10 {
        let m = lite_model(8, seed.wrapping_add(s))?;
        let f = DomainFeatures { categorical: (0..4).map(|_| rng.gen_range(0..6)).collect(), dense: vec![] };
        for st in &block_states(&f, &m)?[1..] {
            for rms in [st.x_bar.rms(), st.y_bar.rms()] {
                lo = lo.min(rms);
                hi = hi.max(rms);
            }
        }
    }
    Ok((
        zero_ok && lo >= 0.1 && hi <= 10.0,
        format!("zero block exact {zero_ok}, 8-block activation RMS in [{lo:.3}, {hi:.3}]"),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cheap_checks_pass() {
        let r = run_selected(7, |n| n != "gradients");
        assert_eq!(r.checks.len(), 7);
        for c in &r.checks {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }

    #[test]
    fn names_cover_suite() {
        let r = run_selected(0, |_| false);
        assert!(r.checks.is_empty() && r.all_passed());
        let r = run_selected(0, |n| n == "multiply-counts");
        assert_eq!(r.checks[0].name, CHECK_NAMES[3]);
    }
}

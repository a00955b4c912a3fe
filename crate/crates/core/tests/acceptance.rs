//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! `cargo test -p unimixer-core --test acceptance -- 1 5 9` runs a subset.
//! Criteria 10 and 11 train models and take a few minutes.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use unimixer_core::config::ExperimentConfig;
use unimixer_core::mixing::{
    check_attention_fm_degeneracy, check_value_projection_equivalence, constrained_weights, unimixing_forward,
    unimixing_naive, UniMixingParams,
};
use unimixer_core::model::{
    block_states, siamese_step, Batch, DomainFeatures, FieldSpec, ModelConfig, SiameseState, UniMixerModel, Variant,
};
use unimixer_core::reference::{build_perm_matrix, fm, token_mixer, verify_perm_properties, PermSpec};
use unimixer_core::scaling::{fit_log_log, run_sweep};
use unimixer_core::sinkhorn::{sinkhorn_knopp, ConstraintConfig};
use unimixer_core::tensor::{rms_norm, RMS_EPS};
use unimixer_core::train::{anneal_tau, finite_diff_grad_check, train, AnnealSchedule, GradCheckConfig, TrainConfig, WarmRestart};
use unimixer_core::verify;
use unimixer_core::{Matrix, Vector};

const SCALING_TOML: &str = include_str!("../../../configs/scaling.toml");

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit_s: f64) -> (bool, String) {
    let s = elapsed.as_secs_f64();
    (s < limit_s, format!("{s:.2}s (limit {limit_s}s)"))
}

fn run_verify(check: fn(u64) -> unimixer_core::Result<(bool, String)>) -> Outcome {
    match check(0) {
        Ok((true, d)) => Ok(d),
        Ok((false, d)) => Err(format!("verify: {d}")),
        Err(e) => Err(format!("verify error: {e}")),
    }
}

/// Index-loop TokenMixer: output row `h` is every token's `h`-th slice of width `D/T`.
fn token_mixer_oracle(x: &Matrix) -> Matrix {
    let (t, d) = x.shape();
    let k = d / t;
    let mut out = Matrix::zeros(t, d);
    for h in 0..t {
        for s in 0..t {
            for e in 0..k {
                out[(h, s * k + e)] = x[(s, h * k + e)];
            }
        }
    }
    out
}

fn c1_tokenmixer() -> Outcome {
    let start = Instant::now();
    let fixture = run_verify(verify::tokenmixer_fixture)?;

    let x = Matrix::from_fn(2, 6, |i, j| (i * 6 + j + 1) as f64);
    let mixed = token_mixer(&x, PermSpec::new(2, 6, 2)).map_err(|e| e.to_string())?;
    let expect = [[1.0, 2.0, 3.0, 7.0, 8.0, 9.0], [4.0, 5.0, 6.0, 10.0, 11.0, 12.0]];
    let fixture_ok = (0..2).all(|i| mixed.row(i) == expect[i]);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut exact = 0;
    for trial in 0..100 {
        let t = [2, 4, 8][trial % 3];
        let d = t * rng.gen_range(1..=4);
        let x = Matrix::random_normal(t, d, 1.0, &mut rng);
        let got = token_mixer(&x, PermSpec::new(t, d, t)).map_err(|e| e.to_string())?;
        let via_p = build_perm_matrix(PermSpec::new(t, d, t)).map_err(|e| e.to_string())?.matvec(x.data()).map_err(|e| e.to_string())?;
        let want = token_mixer_oracle(&x);
        exact += usize::from(got == want && via_p.as_slice() == want.data());
    }
    let (fast, time) = within(start.elapsed(), 1.0);
    ensure(fixture_ok && exact == 100 && fast, format!("{fixture}; loop oracle {exact}/100 exact; {time}"))
}

fn c2_perm_properties() -> Outcome {
    let start = Instant::now();
    let (mut specs, mut bad) = (0, Vec::new());
    for t in 1..=8 {
        for d in [4, 6, 8, 12, 24] {
            for h in (1..=d).filter(|h| d % h == 0) {
                let spec = PermSpec::new(t, d, h);
                let p = build_perm_matrix(spec).map_err(|e| e.to_string())?;
                let n = t * d;
                let k = d / h;
                let binary = p.data().iter().all(|&v| v == 0.0 || v == 1.0);
                let row_nz = (0..n).all(|i| (0..n).filter(|&j| p[(i, j)] != 0.0).count() == 1);
                let col_nz = (0..n).all(|j| (0..n).filter(|&i| p[(i, j)] != 0.0).count() == 1);
                let stochastic = p.row_sums().iter().chain(&p.col_sums()).all(|&s| s == 1.0);
                // P = G ⊗ I_k with G read off the top-left entry of each k×k block
                let m = n / k;
                let kron = (0..n).all(|r| {
                    (0..n).all(|c| {
                        let g = p[((r / k) * k, (c / k) * k)];
                        p[(r, c)] == if r % k == c % k { g } else { 0.0 }
                    })
                }) && m * k == n;
                let symmetric = (0..n).all(|i| (0..n).all(|j| p[(i, j)] == p[(j, i)]));
                let want_sym = t == h || t == 1 || h == 1;
                let report = verify_perm_properties(spec).map_err(|e| e.to_string())?;
                let agree = report.doubly_stochastic == stochastic
                    && report.one_nonzero_per_row_and_col == (row_nz && col_nz)
                    && report.compressible == kron
                    && report.symmetric == symmetric;
                if !(binary && row_nz && col_nz && stochastic && kron && symmetric == want_sym && agree) {
                    bad.push(format!("(T={t}, D={d}, H={h})"));
                }
                specs += 1;
            }
        }
    }
    let (fast, time) = within(start.elapsed(), 1.0);
    ensure(bad.is_empty() && fast, format!("{specs} specs, failures [{}]; {time}", bad.join(", ")))
}

fn rel_sup(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    diff / b.iter().fold(0.0f64, |m, y| m.max(y.abs()))
}

fn c3_pipeline() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst, mut worst_oracle, mut trials) = (0.0f64, 0.0f64, 0);
    for l in [12, 24, 48] {
        for b in [2, 3, 4, 6] {
            for _ in 0..50 {
                let p = UniMixingParams::random(l, b, 1.0, ConstraintConfig::default(), &mut rng).map_err(|e| e.to_string())?;
                let x: Vec<f64> = (0..l).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let fast = unimixing_forward(&x, &p).map_err(|e| e.to_string())?.0;
                let naive = unimixing_naive(&x, &p).map_err(|e| e.to_string())?.0;
                worst = worst.max(rel_sup(fast.as_slice(), naive.as_slice()));

                // y_i = Σ_j g_ij · (x_j W_j) from the constrained weights
                let w = constrained_weights(&p).map_err(|e| e.to_string())?;
                let n = l / b;
                let mut y = vec![0.0; l];
                for i in 0..n {
                    for j in 0..n {
                        for c in 0..b {
                            for a in 0..b {
                                y[i * b + c] += w.global[(i, j)] * x[j * b + a] * w.local[j][(a, c)];
                            }
                        }
                    }
                }
                worst_oracle = worst_oracle.max(rel_sup(naive.as_slice(), &y));
                trials += 1;
            }
        }
    }
    let (fast, time) = within(start.elapsed(), 5.0);
    ensure(
        worst <= 1e-12 && worst_oracle <= 1e-12 && fast,
        format!("{trials} trials, forward vs naive {worst:.2e}, naive vs loop oracle {worst_oracle:.2e}; {time}"),
    )
}

fn c4_multiply_counts() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut wrong = Vec::new();
    let mut at_768 = (0, 0);
    for (l, b) in [(6, 2), (6, 3), (12, 4), (24, 6), (48, 8), (64, 16), (120, 5), (768, 6)] {
        let p = UniMixingParams::random(l, b, 0.1, ConstraintConfig::default(), &mut rng).map_err(|e| e.to_string())?;
        let x = vec![0.5; l];
        let naive = unimixing_naive(&x, &p).map_err(|e| e.to_string())?.1 .0;
        let fast = unimixing_forward(&x, &p).map_err(|e| e.to_string())?.1 .0;
        let (l, b) = (l as u64, b as u64);
        if naive != l * l || fast != l * l / b + l * b {
            wrong.push(format!("(L={l}, B={b}): {naive}/{fast}"));
        }
        if l == 768 {
            at_768 = (naive, fast);
        }
    }
    ensure(
        wrong.is_empty() && at_768 == (589_824, 102_912),
        format!("L=768, B=6: naive {}, optimized {}; formula mismatches [{}]", at_768.0, at_768.1, wrong.join(", ")),
    )
}

fn row_entropy(m: &Matrix) -> f64 {
    let mut h = 0.0;
    for i in 0..m.rows() {
        for &p in m.row(i) {
            if p > 0.0 {
                h -= p * p.ln();
            }
        }
    }
    h / m.rows() as f64
}

fn c5_sinkhorn() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = ConstraintConfig { tau: 1.0, max_iters: 100, tol: 1e-6 };
    let (mut dev, mut asym, mut iters) = (0.0f64, 0.0f64, 0);
    for n in [4, 8, 16, 24, 32, 64, 96, 128] {
        let w = Matrix::random_normal(n, n, 1.0, &mut rng);
        let out = sinkhorn_knopp(&w, &cfg).map_err(|e| e.to_string())?;
        iters = iters.max(out.iterations);
        for i in 0..n {
            let row: f64 = (0..n).map(|j| out.matrix[(i, j)]).sum();
            let col: f64 = (0..n).map(|j| out.matrix[(j, i)]).sum();
            dev = dev.max((row - 1.0).abs()).max((col - 1.0).abs());
        }
        let sym = Matrix::from_fn(n, n, |i, j| w[(i, j)] + w[(j, i)]);
        let s = sinkhorn_knopp(&sym, &cfg).map_err(|e| e.to_string())?.matrix;
        for i in 0..n {
            for j in 0..n {
                asym = asym.max((s[(i, j)] - s[(j, i)]).abs());
            }
        }
    }
    let mut sharper = 0;
    let seeds = 5;
    for seed in 0..seeds {
        let w = Matrix::random_normal(16, 16, 0.1, &mut ChaCha8Rng::seed_from_u64(seed));
        let cold = sinkhorn_knopp(&w, &cfg.with_tau(0.05)).map_err(|e| e.to_string())?.matrix;
        let hot = sinkhorn_knopp(&w, &cfg.with_tau(1.0)).map_err(|e| e.to_string())?.matrix;
        sharper += usize::from(row_entropy(&cold) < row_entropy(&hot));
    }
    ensure(
        dev <= 1e-6 && asym <= 1e-10 && iters <= 100 && sharper == seeds as usize,
        format!("max |sum-1| {dev:.2e} within {iters} iterations, max asymmetry {asym:.2e}, entropy lower at τ=0.05 for {sharper}/{seeds} seeds"),
    )
}

fn c6_degeneracies() -> Outcome {
    let dispatcher = run_verify(verify::degeneracies)?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (t, d) = (5, 4);
    let x = Matrix::random_normal(t, d, 1.0, &mut rng);
    let y = Matrix::random_normal(t, d, 1.0, &mut rng);
    let shared: Vec<Matrix> = (0..t).map(|_| Matrix::random_normal(d, d, 0.5, &mut rng)).collect();
    let value_ok = check_value_projection_equivalence(&x, &shared, &shared).map_err(|e| e.to_string())?;

    // (X Xᵀ) Y by explicit loops
    let mut xxt = Matrix::zeros(t, t);
    for i in 0..t {
        for j in 0..t {
            for k in 0..d {
                xxt[(i, j)] += x[(i, k)] * x[(j, k)];
            }
        }
    }
    let mut want = Matrix::zeros(t, d);
    for i in 0..t {
        for c in 0..d {
            for j in 0..t {
                want[(i, c)] += xxt[(i, j)] * y[(j, c)];
            }
        }
    }
    let got = fm(&x, &y).map_err(|e| e.to_string())?;
    let fm_exact = got == want;
    let identity = check_attention_fm_degeneracy(&x, &y).map_err(|e| e.to_string())?.algebraic_match;
    ensure(
        value_ok && fm_exact && identity,
        format!("value projection {value_ok}, XXᵀY loop oracle exact {fm_exact}, attention without softmax = FM {identity}; {dispatcher}"),
    )
}

fn lite_model(num_blocks: usize, seed: u64) -> UniMixerModel {
    // 4 categorical fields × 8 → T = 4 tokens of D = 12, so L = 48
    let cfg = ModelConfig {
        fields: (0..4).map(|k| FieldSpec::Categorical { name: format!("c{k}"), cardinality: 5, embed_dim: 8 }).collect(),
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
    UniMixerModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).expect("valid model")
}

fn c7_gradients() -> Outcome {
    let start = Instant::now();
    let model = lite_model(2, 7);
    if model.stream_len() != 48 {
        return Err(format!("model stream length {} != 48", model.stream_len()));
    }
    let families: BTreeSet<_> = model.param_names().into_iter().map(|(_, f)| f).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let n = 8;
    let batch = Batch {
        categorical: (0..4).map(|_| (0..n).map(|_| rng.gen_range(0..5)).collect()).collect(),
        dense: Matrix::zeros(n, 0),
    };
    let labels: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
    let mut parts = Vec::new();
    let mut ok = true;
    for tau in [1.0, 0.3, 0.05] {
        let r = finite_diff_grad_check(&model, &batch, &labels, tau, &GradCheckConfig { seed: 7, ..Default::default() })
            .map_err(|e| e.to_string())?;
        let covered: BTreeSet<_> = r.families.keys().copied().collect();
        ok &= r.checked >= 200 && r.max_rel_error <= 1e-4 && covered == families;
        parts.push(format!("τ={tau}: {} probes over {} families, max rel err {:.2e}", r.checked, covered.len(), r.max_rel_error));
    }
    let (fast, time) = within(start.elapsed(), 60.0);
    ensure(ok && fast, format!("{}; {time}", parts.join("; ")))
}

fn c8_siamese() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Vector::new((0..48).map(|_| rng.gen_range(-4.0..4.0)).collect());
    let y = Vector::new((0..48).map(|_| rng.gen_range(-4.0..4.0)).collect());
    let next = siamese_step(&SiameseState { x_bar: x.clone(), y_bar: y.clone() }, |u| Ok(Vector::zeros(u.len())))
        .map_err(|e| e.to_string())?;
    let normed = rms_norm(x.as_slice(), RMS_EPS).map_err(|e| e.to_string())?;
    let ms = x.as_slice().iter().map(|v| v * v).sum::<f64>() / 48.0;
    let oracle: Vec<f64> = x.as_slice().iter().map(|v| v / (ms + RMS_EPS).sqrt()).collect();
    let zero_ok = next.x_bar == normed && next.y_bar == y && rel_sup(normed.as_slice(), &oracle) <= 1e-15;

    let rms = |v: &Vector| (v.as_slice().iter().map(|a| a * a).sum::<f64>() / v.len() as f64).sqrt();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for seed in 0..10 {
        let m = lite_model(8, 100 + seed);
        let f = DomainFeatures { categorical: (0..4).map(|_| rng.gen_range(0..5)).collect(), dense: Vec::new() };
        let states = block_states(&f, &m).map_err(|e| e.to_string())?;
        if states.len() != 9 {
            return Err(format!("expected 9 states, got {}", states.len()));
        }
        for s in &states[1..] {
            for r in [rms(&s.x_bar), rms(&s.y_bar)] {
                lo = lo.min(r);
                hi = hi.max(r);
            }
        }
    }
    ensure(
        zero_ok && lo >= 0.1 && hi <= 10.0,
        format!("zero block exact {zero_ok}; 8-block activation RMS over 10 seeds in [{lo:.3}, {hi:.3}]"),
    )
}

fn c9_power_law() -> Outcome {
    let start = Instant::now();
    let xs: Vec<f64> = (0..20).map(|k| 10f64.powf(-1.0 + 3.0 * k as f64 / 19.0)).collect();
    let mut hits = 0;
    for trial in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + trial);
        let noise = Normal::new(0.0, 0.01).expect("valid normal");
        let ys: Vec<f64> = xs.iter().map(|x| 0.004 * x.powf(0.13) * (1.0 + noise.sample(&mut rng))).collect();
        let (_, b, _) = fit_log_log(&xs, &ys).map_err(|e| e.to_string())?;
        hits += usize::from((b - 0.13).abs() <= 0.01);
    }
    let (fast, time) = within(start.elapsed(), 5.0);
    ensure(hits >= 95 && fast, format!("b within ±0.01 of 0.13 in {hits}/100 trials; {time}"))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn c10_scaling() -> Outcome {
    let start = Instant::now();
    let cfg = ExperimentConfig::from_toml_str(SCALING_TOML).map_err(|e| e.to_string())?;
    let data = cfg.data.dataset(None).map_err(|e| e.to_string())?;
    let points = run_sweep(&cfg, &data).map_err(|e| e.to_string())?;
    let mut rows = Vec::new();
    for (size, _) in cfg.sizes() {
        let runs: Vec<_> = points.iter().filter(|p| p.size == size).collect();
        let failed = runs.iter().filter(|p| !p.status.is_ok()).count();
        rows.push((size, runs[0].params, median(runs.iter().map(|p| p.auc).collect()), failed));
    }
    let above = rows.iter().all(|r| r.2 > 0.5 && r.3 == 0);
    let monotone = rows.windows(2).all(|w| w[0].1 < w[1].1 && w[0].2 <= w[1].2);
    let (fast, time) = within(start.elapsed(), 900.0);
    let table: Vec<String> = rows.iter().map(|(s, p, a, _)| format!("{s} {p} params AUC {a:.4}")).collect();
    ensure(
        data.len() == 50_000 && above && monotone && fast,
        format!("median held-out AUC: {}; {time}", table.join(", ")),
    )
}

fn c11_annealing() -> Outcome {
    let mut exact = true;
    for (start, end, j) in [(1.0, 0.05, 1000), (1.0, 0.3, 2000), (0.7, 0.05, 10), (5.0, 0.01, 2), (2.0, 0.1, 1)] {
        let s = AnnealSchedule { tau_start: start, tau_end: end, steps: j };
        exact &= anneal_tau(0, &s) == start && anneal_tau(j, &s) == end;
        if j % 2 == 0 {
            exact &= anneal_tau(j / 2, &s) == (start + end) / 2.0;
        }
    }

    let cfg = ExperimentConfig::from_toml_str(SCALING_TOML).map_err(|e| e.to_string())?;
    let data = cfg.data.dataset(None).map_err(|e| e.to_string())?;
    let medium = cfg.sweep.sizes.iter().find(|s| s.name.as_deref() == Some("medium")).ok_or("no medium size")?;
    let (steps, low_tau) = (2000, 0.05);
    let mut wins = 0;
    let mut runs = Vec::new();
    for seed in 0..3u64 {
        let model = UniMixerModel::new(
            cfg.model_config(&data, Variant::UniMixingLite, Some(medium)),
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .map_err(|e| e.to_string())?;
        let base = TrainConfig { seed, steps, eval_every: steps, ..cfg.training.clone() };
        let warm = TrainConfig {
            schedule: AnnealSchedule::constant(1.0),
            warm_restart: Some(WarmRestart { phase1_steps: steps / 4, low_tau }),
            ..base.clone()
        };
        let cold = TrainConfig { schedule: AnnealSchedule::constant(low_tau), warm_restart: None, ..base };
        let w = train(model.clone(), &data, &warm).map_err(|e| e.to_string())?.final_train_loss;
        let c = train(model, &data, &cold).map_err(|e| e.to_string())?.final_train_loss;
        wins += usize::from(w < c);
        runs.push(format!("seed {seed} warm {w:.4} cold {c:.4}"));
    }
    ensure(
        exact && wins >= 2,
        format!("schedule endpoints and midpoint exact {exact}; warm restart lower final train loss in {wins}/3 ({})", runs.join(", ")),
    )
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 11] = [
        (1, "TokenMixer equivalence", c1_tokenmixer),
        (2, "permutation properties", c2_perm_properties),
        (3, "pipeline equivalence", c3_pipeline),
        (4, "multiply counts", c4_multiply_counts),
        (5, "Sinkhorn constraints", c5_sinkhorn),
        (6, "unified-framework degeneracies", c6_degeneracies),
        (7, "gradient check", c7_gradients),
        (8, "SiameseNorm", c8_siamese),
        (9, "power-law fitter", c9_power_law),
        (10, "desk-scale scaling sweep", c10_scaling),
        (11, "annealing and warm restart", c11_annealing),
    ];
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if std::env::args().any(|a| a == "--list") {
        for (n, name, _) in &criteria {
            println!("criterion {n}: {name}");
        }
        return;
    }
    let selected: Vec<u32> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (n, name, run) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(d) => println!("criterion {n:>2} PASS [{secs:7.2}s] {name}: {d}"),
            Err(d) => {
                println!("criterion {n:>2} FAIL [{secs:7.2}s] {name}: {d}");
                failed.push(n);
            }
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}

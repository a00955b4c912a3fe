//! Seeded fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unimixer_core::mixing::{LiteParams, UniMixingParams};
use unimixer_core::model::{Batch, FieldSpec, ModelConfig, UniMixerModel, Variant};
use unimixer_core::sinkhorn::ConstraintConfig;
use unimixer_core::Matrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn input(len: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..len).map(|_| r.gen_range(-1.0..1.0)).collect()
}

pub fn unimixing(len: usize, block: usize) -> UniMixingParams {
    UniMixingParams::random(len, block, 0.02, ConstraintConfig::default(), &mut rng(1)).expect("valid shape")
}

pub fn lite(len: usize, block: usize, rank: usize, basis: usize) -> LiteParams {
    LiteParams::random(len, block, rank, basis, 0.02, ConstraintConfig::default(), &mut rng(2)).expect("valid shape")
}

pub fn raw_square(n: usize) -> Matrix {
    Matrix::random_normal(n, n, 1.0, &mut rng(3))
}

/// UniMixing-Lite model over 8 categorical fields of width 8 with `T = 8`
/// tokens of width `token_dim`, plus a random batch.
pub fn lite_model(token_dim: usize, block: usize, batch: usize) -> (UniMixerModel, Batch, Vec<f64>) {
    let cfg = ModelConfig {
        fields: (0..8).map(|k| FieldSpec::Categorical { name: format!("f{k}"), cardinality: 16, embed_dim: 8 }).collect(),
        chunk: 8,
        token_dim,
        block,
        num_blocks: 2,
        expansion: 2,
        variant: Variant::UniMixingLite,
        rank: 4,
        basis: 2,
        constraint: ConstraintConfig { tau: 1.0, max_iters: 20, tol: 1e-6 },
    };
    let model = UniMixerModel::new(cfg, &mut rng(4)).expect("valid config");
    let mut r = rng(5);
    let categorical = (0..8).map(|_| (0..batch).map(|_| r.gen_range(0..16)).collect()).collect();
    let labels = (0..batch).map(|_| f64::from(u8::from(r.gen_bool(0.5)))).collect();
    (model, Batch { categorical, dense: Matrix::zeros(batch, 0) }, labels)
}

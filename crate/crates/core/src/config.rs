//! Experiment configuration read from TOML.
//!
//! Every section and key is optional and unknown keys are rejected. The
//! defaults describe a small UniMixing-Lite model on a generated
//! planted-interaction dataset:
//!
//! ```toml
//! [data]
//! # path = "samples.csv"    # load a dataset CSV instead of generating one
//! samples = 50000
//! groups = 100
//! cardinalities = [16, 16, 16, 16, 16, 16]
//! dense_dims = [8, 8]
//! pairs = 6                  # random pairwise terms, used when `terms` is empty
//! triples = 2                # random three-way terms
//! term_scale = 1.5
//! bias = 0.0
//! label_noise = 0.0
//! seed = 0
//! # terms = [{ fields = [0, 3], coef = 1.5 }]
//!
//! [tokenizer]
//! embed_dim = 8              # width of every categorical embedding
//! chunk = 8                  # d
//! token_dim = 16             # D
//!
//! [blocks]
//! variant = "unimixing-lite"
//! block = 8                  # B
//! num_blocks = 2
//! expansion = 2
//! rank = 4                   # Lite only
//! basis = 2                  # Lite only
//! sinkhorn_iters = 20        # fixed unroll depth
//! sinkhorn_tol = 1e-6
//!
//! [training]
//! batch_size = 256
//! steps = 1000
//! eval_every = 200
//! seed = 0
//! holdout = 0.1
//! split_seed = 0
//! loss_samples = 5000
//! adam = { lr = 0.001, beta1 = 0.9, beta2 = 0.999, eps = 1e-8 }
//! schedule = { tau_start = 1.0, tau_end = 0.05, steps = 1000 }
//! # warm_restart = { phase1_steps = 500, low_tau = 0.05 }
//!
//! [sweep]
//! variants = ["unimixing-lite"]
//! seeds = [0, 1, 2]
//! # one run per size; an empty list sweeps the [tokenizer]/[blocks] model only
//! # [[sweep.sizes]]
//! # name = "small"
//! # token_dim = 8
//! # block = 4
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::sinkhorn::ConstraintConfig;
use crate::train::{generate_synthetic, random_terms, Dataset, PlantedTerm, SyntheticSpec, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub samples: usize,
    pub groups: usize,
    pub cardinalities: Vec<usize>,
    pub dense_dims: Vec<usize>,
    pub terms: Vec<PlantedTerm>,
    pub pairs: usize,
    pub triples: usize,
    pub term_scale: f64,
    pub bias: f64,
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            samples: 50_000,
            groups: 100,
            cardinalities: vec![16; 6],
            dense_dims: vec![8, 8],
            terms: Vec::new(),
            pairs: 6,
            triples: 2,
            term_scale: 1.5,
            bias: 0.0,
            label_noise: 0.0,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn synthetic_spec(&self) -> SyntheticSpec {
        let fields = self.cardinalities.len() + self.dense_dims.len();
        let terms = if self.terms.is_empty() {
            random_terms(fields, self.pairs, self.triples, self.term_scale, self.seed)
        } else {
            self.terms.clone()
        };
        SyntheticSpec {
            samples: self.samples,
            groups: self.groups,
            cardinalities: self.cardinalities.clone(),
            dense_dims: self.dense_dims.clone(),
            terms,
            bias: self.bias,
            label_noise: self.label_noise,
            seed: self.seed,
        }
    }

    /// Loads `path` when set, otherwise generates the planted-interaction data.
    /// A relative `path` is resolved against `base`.
    pub fn dataset(&self, base: Option<&Path>) -> Result<Dataset> {
        match &self.path {
            Some(p) => {
                let p = match base {
                    Some(b) if p.is_relative() => b.join(p),
                    _ => p.clone(),
                };
                Dataset::load_csv(&p)
            }
            None => generate_synthetic(&self.synthetic_spec()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    pub embed_dim: usize,
    pub chunk: usize,
    pub token_dim: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self { embed_dim: 8, chunk: 8, token_dim: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlocksConfig {
    pub variant: Variant,
    pub block: usize,
    pub num_blocks: usize,
    pub expansion: usize,
    pub rank: usize,
    pub basis: usize,
    pub sinkhorn_iters: usize,
    pub sinkhorn_tol: f64,
}

impl Default for BlocksConfig {
    fn default() -> Self {
        Self {
            variant: Variant::UniMixingLite,
            block: 8,
            num_blocks: 2,
            expansion: 2,
            rank: 4,
            basis: 2,
            sinkhorn_iters: 20,
            sinkhorn_tol: 1e-6,
        }
    }
}

/// Per-size overrides of the `[tokenizer]` and `[blocks]` settings.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SizeConfig {
    pub name: Option<String>,
    pub chunk: Option<usize>,
    pub token_dim: Option<usize>,
    pub block: Option<usize>,
    pub num_blocks: Option<usize>,
    pub expansion: Option<usize>,
    pub rank: Option<usize>,
    pub basis: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub sizes: Vec<SizeConfig>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { variants: vec![Variant::UniMixingLite], seeds: vec![0, 1, 2], sizes: Vec::new() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub tokenizer: TokenizerConfig,
    pub blocks: BlocksConfig,
    pub training: TrainConfig,
    pub sweep: SweepConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks everything that can be checked without the dataset.
    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        if self.data.path.is_none() {
            self.data.synthetic_spec().validate()?;
        }
        if self.tokenizer.embed_dim == 0 {
            return Err(Error::Config("tokenizer.embed_dim must be at least 1".into()));
        }
        if self.blocks.sinkhorn_iters == 0 {
            return Err(Error::Config("blocks.sinkhorn_iters must be at least 1".into()));
        }
        if self.sweep.variants.is_empty() || self.sweep.seeds.is_empty() {
            return Err(Error::Config("sweep needs at least one variant and one seed".into()));
        }
        Ok(())
    }

    /// Model shape for `variant` on `data`, with `size` overrides applied.
    pub fn model_config(&self, data: &Dataset, variant: Variant, size: Option<&SizeConfig>) -> ModelConfig {
        let s = size.cloned().unwrap_or_default();
        let (t, b) = (&self.tokenizer, &self.blocks);
        ModelConfig {
            fields: data.field_specs(t.embed_dim),
            chunk: s.chunk.unwrap_or(t.chunk),
            token_dim: s.token_dim.unwrap_or(t.token_dim),
            block: s.block.unwrap_or(b.block),
            num_blocks: s.num_blocks.unwrap_or(b.num_blocks),
            expansion: s.expansion.unwrap_or(b.expansion),
            variant,
            rank: s.rank.unwrap_or(b.rank),
            basis: s.basis.unwrap_or(b.basis),
            constraint: ConstraintConfig {
                tau: self.training.schedule.tau_start,
                max_iters: b.sinkhorn_iters,
                tol: b.sinkhorn_tol,
            },
        }
    }

    /// `(label, overrides)` for every swept size; the base model alone when
    /// no sizes are listed.
    pub fn sizes(&self) -> Vec<(String, Option<&SizeConfig>)> {
        if self.sweep.sizes.is_empty() {
            return vec![("base".to_string(), None)];
        }
        self.sweep
            .sizes
            .iter()
            .enumerate()
            .map(|(k, s)| (s.name.clone().unwrap_or_else(|| format!("size{k}")), Some(s)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(ExperimentConfig::from_toml_str("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn documented_defaults_match() {
        let doc: String = include_str!("config.rs")
            .lines()
            .take_while(|l| l.starts_with("//!"))
            .map(|l| l.trim_start_matches("//!").trim_start_matches(' '))
            .skip_while(|l| *l != "```toml")
            .skip(1)
            .take_while(|l| *l != "```")
            .collect::<Vec<_>>()
            .join("\n");
        assert_eq!(ExperimentConfig::from_toml_str(&doc).unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = ExperimentConfig::default();
        cfg.sweep.sizes.push(SizeConfig { name: Some("s".into()), token_dim: Some(8), ..Default::default() });
        cfg.training.warm_restart = Some(crate::train::WarmRestart { phase1_steps: 10, low_tau: 0.05 });
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        for bad in [
            "[data]\nsamplez = 3",
            "[blocks]\nvariant = \"mlp\"",
            "[training.adam]\nlr = -1.0",
            "[surprise]\nx = 1",
            "[sweep]\nseeds = []",
            "[training.schedule]\ntau_start = 0.01\ntau_end = 0.5",
        ] {
            assert!(matches!(ExperimentConfig::from_toml_str(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn size_overrides_apply() {
        let cfg = ExperimentConfig::from_toml_str(
            "[data]\nsamples = 50\n[[sweep.sizes]]\ntoken_dim = 32\nblock = 16\n[[sweep.sizes]]\nname = \"b\"\n",
        )
        .unwrap();
        let data = cfg.data.dataset(None).unwrap();
        let sizes = cfg.sizes();
        assert_eq!(sizes.iter().map(|s| s.0.as_str()).collect::<Vec<_>>(), ["size0", "b"]);
        let m = cfg.model_config(&data, Variant::UniMixing, sizes[0].1);
        assert_eq!((m.token_dim, m.block, m.chunk), (32, 16, 8));
        m.validate().unwrap();
        assert_eq!(cfg.model_config(&data, Variant::Fm, sizes[1].1).token_dim, 16);
    }
}

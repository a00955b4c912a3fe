//! Parameter and FLOP accounting, scaling sweeps, power-law fits and reports.

mod fit;
mod report;

pub use fit::{fit_by_variant, fit_log_log, fit_power_law, PowerLawFit, XKind};
pub use report::{
    emit_report, read_fits_csv, read_points_csv, render_svg, write_fits_csv, write_points_csv, POINTS_HEADER,
};

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::{forward_macs, MacBreakdown, ParamBreakdown, UniMixerModel, Variant};
use crate::train::{train, Dataset};

/// Trainable scalars of `model` per module.
pub fn count_params(model: &UniMixerModel) -> ParamBreakdown {
    model.param_breakdown()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlopCount {
    pub per_sample: MacBreakdown,
    pub batch_size: u64,
}

impl FlopCount {
    pub fn macs(&self) -> u64 {
        self.per_sample.total() * self.batch_size
    }

    /// Two FLOPs per multiply-accumulate.
    pub fn flops(&self) -> u64 {
        2 * self.macs()
    }
}

pub fn count_flops(model: &UniMixerModel, batch_size: usize) -> FlopCount {
    FlopCount { per_sample: forward_macs(model), batch_size: batch_size as u64 }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RunStatus {
    Ok,
    Failed(String),
}

impl RunStatus {
    pub fn is_ok(&self) -> bool {
        matches!(self, RunStatus::Ok)
    }
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunStatus::Ok => f.write_str("ok"),
            RunStatus::Failed(why) => write!(f, "failed: {why}"),
        }
    }
}

impl FromStr for RunStatus {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ok" => Ok(RunStatus::Ok),
            _ => match s.strip_prefix("failed: ") {
                Some(why) => Ok(RunStatus::Failed(why.to_string())),
                None => Err(Error::Parse(format!("unknown run status '{s}'"))),
            },
        }
    }
}

/// One trained model in a sweep. Failed runs keep NaN metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalingPoint {
    pub variant: Variant,
    pub size: String,
    /// Dense parameters (embedding tables excluded).
    pub params: usize,
    /// Forward FLOPs per sample, two per multiply-accumulate.
    pub flops: u64,
    pub macs: u64,
    pub auc: f64,
    pub uauc: f64,
    pub seed: u64,
    pub status: RunStatus,
}

impl ScalingPoint {
    pub fn x(&self, kind: XKind) -> f64 {
        match kind {
            XKind::Params => self.params as f64,
            XKind::Flops => self.flops as f64,
        }
    }
}

struct Run {
    variant: Variant,
    size: String,
    seed: u64,
    model: crate::model::ModelConfig,
}

/// Trains every (variant, size, seed) of the sweep on `data` and evaluates it
/// on the shared held-out split. Runs execute in parallel; the result order
/// is variant, then size, then seed. A run that diverges or fails to evaluate
/// is kept as a failed point.
pub fn run_sweep(cfg: &ExperimentConfig, data: &Dataset) -> Result<Vec<ScalingPoint>> {
    run_sweep_with(cfg, data, |_| {})
}

/// [`run_sweep`] calling `done` as each run finishes.
pub fn run_sweep_with(
    cfg: &ExperimentConfig,
    data: &Dataset,
    done: impl Fn(&ScalingPoint) + Sync,
) -> Result<Vec<ScalingPoint>> {
    cfg.validate()?;
    let mut runs = Vec::new();
    for &variant in &cfg.sweep.variants {
        for (size, overrides) in cfg.sizes() {
            let model = cfg.model_config(data, variant, overrides);
            model.validate().map_err(|e| Error::Config(format!("{variant} size '{size}': {e}")))?;
            for &seed in &cfg.sweep.seeds {
                runs.push(Run { variant, size: size.clone(), seed, model: model.clone() });
            }
        }
    }
    runs.into_par_iter()
        .map(|run| {
            let p = sweep_point(&run, cfg, data)?;
            done(&p);
            Ok(p)
        })
        .collect()
}

fn sweep_point(run: &Run, cfg: &ExperimentConfig, data: &Dataset) -> Result<ScalingPoint> {
    let model = UniMixerModel::new(run.model.clone(), &mut ChaCha8Rng::seed_from_u64(run.seed))?;
    let macs = forward_macs(&model).total();
    let mut point = ScalingPoint {
        variant: run.variant,
        size: run.size.clone(),
        params: count_params(&model).dense(),
        flops: 2 * macs,
        macs,
        auc: f64::NAN,
        uauc: f64::NAN,
        seed: run.seed,
        status: RunStatus::Ok,
    };
    let tc = crate::train::TrainConfig { seed: run.seed, ..cfg.training.clone() };
    match train(model, data, &tc) {
        Ok(out) => {
            point.auc = out.eval.auc;
            point.uauc = out.eval.uauc.map_or(f64::NAN, |u| u.value);
        }
        Err(e @ (Error::Diverged { .. } | Error::UndefinedMetric(_))) => {
            point.status = RunStatus::Failed(e.to_string());
        }
        Err(e) => return Err(e),
    }
    Ok(point)
}

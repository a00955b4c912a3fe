use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_graph, Batch, UniMixerModel};
use crate::tensor::Matrix;
use crate::train::data::Dataset;
use crate::train::metrics::{auc, bce_loss, uauc, Uauc};
use crate::train::optim::{anneal_tau, Adam, AdamConfig, AnnealSchedule};

/// Train at `tau_start` for `phase1_steps`, then reset the optimizer and
/// continue from the learned weights at `low_tau`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarmRestart {
    pub phase1_steps: usize,
    pub low_tau: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub steps: usize,
    pub schedule: AnnealSchedule,
    pub warm_restart: Option<WarmRestart>,
    /// Held-out AUC is computed every `eval_every` steps and after the last one.
    pub eval_every: usize,
    /// Seeds batch order.
    pub seed: u64,
    /// Fraction of every group held out for evaluation.
    pub holdout: f64,
    /// Seeds the train/held-out split, shared by all runs on one dataset.
    pub split_seed: u64,
    /// Training samples used to measure the final training loss.
    pub loss_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 256,
            steps: 1000,
            schedule: AnnealSchedule::default(),
            warm_restart: None,
            eval_every: 200,
            seed: 0,
            holdout: 0.1,
            split_seed: 0,
            loss_samples: 5000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        self.schedule.validate()?;
        if self.batch_size == 0 || self.eval_every == 0 || self.loss_samples == 0 {
            return Err(Error::Config("batch_size, eval_every and loss_samples must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return Err(Error::Config(format!("holdout fraction {} must lie in [0, 1)", self.holdout)));
        }
        if let Some(w) = self.warm_restart {
            if !(w.low_tau > 0.0) {
                return Err(Error::Config("warm-restart low_tau must be positive".into()));
            }
            if w.phase1_steps > self.steps {
                return Err(Error::Config("warm-restart phase 1 is longer than the run".into()));
            }
        }
        Ok(())
    }

    /// Temperature used at (0-based) step `j`.
    pub fn tau_at(&self, j: usize) -> f64 {
        match self.warm_restart {
            Some(w) if j < w.phase1_steps => self.schedule.tau_start,
            Some(w) => w.low_tau,
            None => anneal_tau(j, &self.schedule),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub tau: f64,
    pub eval_auc: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub auc: f64,
    /// `None` when no held-out group contains both classes.
    pub uauc: Option<Uauc>,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: UniMixerModel,
    pub trace: Vec<StepRecord>,
    /// Mean BCE over (a prefix of) the training split after the last step.
    pub final_train_loss: f64,
    pub eval: EvalMetrics,
}

/// Mean BCE of a labelled batch and its gradient for every parameter.
pub fn loss_and_grads(m: &UniMixerModel, batch: &Batch, labels: &[f64], tau: f64) -> Result<(f64, Vec<Matrix>)> {
    let fg = build_graph(m, batch, tau)?;
    let mut g = fg.graph;
    let loss = g.bce(fg.logits, labels.to_vec());
    let value = g.value(loss)[(0, 0)];
    let grads = g.backward(loss);
    let out = fg.params.iter().map(|&id| grads.get_or_zeros(id, g.value(id).shape())).collect();
    Ok((value, out))
}

pub fn batch_loss(m: &UniMixerModel, batch: &Batch, labels: &[f64], tau: f64) -> Result<f64> {
    let logits = predict(m, batch, tau)?;
    bce_loss(&logits, labels)
}

fn predict(m: &UniMixerModel, batch: &Batch, tau: f64) -> Result<Vec<f64>> {
    let fg = build_graph(m, batch, tau)?;
    Ok(fg.graph.value(fg.logits).data().to_vec())
}

/// Logits for the given samples, in chunks.
pub fn predict_indices(m: &UniMixerModel, data: &Dataset, idx: &[usize], tau: f64) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(2048) {
        out.extend(predict(m, &data.batch(chunk), tau)?);
    }
    Ok(out)
}

pub fn evaluate(m: &UniMixerModel, data: &Dataset, idx: &[usize], tau: f64) -> Result<EvalMetrics> {
    let logits = predict_indices(m, data, idx, tau)?;
    let labels = data.labels_of(idx);
    let groups: Vec<u32> = idx.iter().map(|&i| data.groups[i]).collect();
    let u = match uauc(&logits, &labels, &groups) {
        Ok(u) => Some(u),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(EvalMetrics { auc: auc(&logits, &labels)?, uauc: u, loss: bce_loss(&logits, &labels)? })
}

/// Trains `model` on the training split of `data` with Adam.
pub fn train(mut model: UniMixerModel, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.validate()?;
    let (train_idx, held_idx) = data.split_by_group(cfg.holdout, cfg.split_seed);
    if train_idx.is_empty() || held_idx.is_empty() {
        return Err(Error::Config("dataset too small for a train/held-out split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.adam, &model);
    let mut order = train_idx.clone();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut trace = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        if let Some(w) = cfg.warm_restart {
            if step == w.phase1_steps && step > 0 {
                adam.reset();
            }
        }
        let tau = cfg.tau_at(step);
        if cursor + cfg.batch_size > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..(cursor + cfg.batch_size).min(order.len())];
        cursor += idx.len();
        let (loss, grads) = match loss_and_grads(&model, &data.batch(idx), &data.labels_of(idx), tau) {
            // weights pushed past the exp range by earlier updates
            Err(Error::Range(_)) if step > 0 => return Err(Error::Diverged { step, loss: f64::NAN }),
            r => r?,
        };
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { step, loss });
        }
        adam.step(&mut model, &grads);
        let eval_auc = if (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps {
            Some(evaluate(&model, data, &held_idx, tau)?.auc)
        } else {
            None
        };
        trace.push(StepRecord { step, loss, tau, eval_auc });
    }

    let final_tau = if cfg.steps == 0 { cfg.tau_at(0) } else { cfg.tau_at(cfg.steps - 1) };
    model.set_tau(final_tau);
    let probe = &train_idx[..cfg.loss_samples.min(train_idx.len())];
    let logits = predict_indices(&model, data, probe, final_tau)?;
    let final_train_loss = bce_loss(&logits, &data.labels_of(probe))?;
    if !final_train_loss.is_finite() {
        return Err(Error::Diverged { step: cfg.steps, loss: final_train_loss });
    }
    let eval = evaluate(&model, data, &held_idx, final_tau)?;
    Ok(TrainOutcome { model, trace, final_train_loss, eval })
}

/// Writes `step,loss,tau,eval_auc` rows; `eval_auc` is empty between evaluations.
pub fn write_trace_csv<W: std::io::Write>(trace: &[StepRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let err = |e: csv::Error| Error::Parse(e.to_string());
    out.write_record(["step", "loss", "tau", "eval_auc"]).map_err(err)?;
    for r in trace {
        let auc = r.eval_auc.map_or(String::new(), |a| a.to_string());
        out.write_record([r.step.to_string(), r.loss.to_string(), r.tau.to_string(), auc]).map_err(err)?;
    }
    out.flush()?;
    Ok(())
}

//! Adam and the temperature schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::UniMixerModel;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 0.001, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be non-negative, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("Adam eps must be positive".into()));
        }
        Ok(())
    }
}

/// Adam state for every parameter of a model, in visit order.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, model: &UniMixerModel) -> Self {
        let zeros: Vec<Matrix> = model.params().iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self { cfg, m: zeros.clone(), v: zeros, t: 0 }
    }

    /// Clears both moment estimates and the step counter.
    pub fn reset(&mut self) {
        for (m, v) in self.m.iter_mut().zip(&mut self.v) {
            m.data_mut().fill(0.0);
            v.data_mut().fill(0.0);
        }
        self.t = 0;
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one bias-corrected update; `grads` follows the model's visit order.
    pub fn step(&mut self, model: &mut UniMixerModel, grads: &[Matrix]) {
        assert_eq!(grads.len(), self.m.len(), "one gradient per parameter");
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        let mut k = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_params_mut(|_, _, p| {
            let (m, v, g) = (&mut ms[k], &mut vs[k], &grads[k]);
            for (((w, mi), vi), &gi) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
            k += 1;
        });
    }
}

/// Linear temperature decay from `tau_start` to `tau_end` over `steps` iterations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnealSchedule {
    pub tau_start: f64,
    pub tau_end: f64,
    pub steps: usize,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self { tau_start: 1.0, tau_end: 0.05, steps: 1000 }
    }
}

impl AnnealSchedule {
    pub fn constant(tau: f64) -> Self {
        Self { tau_start: tau, tau_end: tau, steps: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_end > 0.0 && self.tau_start >= self.tau_end && self.tau_start.is_finite()) {
            return Err(Error::Config(format!(
                "schedule needs tau_start >= tau_end > 0, got {} and {}",
                self.tau_start, self.tau_end
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("anneal steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// `max(tau_start - (tau_start - tau_end) · j / J, tau_end)`.
///
/// Evaluated as `tau_end + (tau_start - tau_end) · (1 - j / J)`, which is
/// monotone under rounding and hits both endpoints exactly. The midpoint of
/// an even `J` is returned as `(tau_start + tau_end) / 2` directly, since the
/// general form can land one ulp below it.
pub fn anneal_tau(j: usize, s: &AnnealSchedule) -> f64 {
    if j == 0 {
        return s.tau_start;
    }
    if j >= s.steps {
        return s.tau_end;
    }
    if 2 * j == s.steps {
        return (s.tau_start + s.tau_end) / 2.0;
    }
    let rest = 1.0 - j as f64 / s.steps as f64;
    (s.tau_end + (s.tau_start - s.tau_end) * rest).min(s.tau_start)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn anneal_fixed_points() {
        let s = AnnealSchedule { tau_start: 1.0, tau_end: 0.05, steps: 100 };
        assert_eq!(anneal_tau(0, &s), 1.0);
        assert_eq!(anneal_tau(100, &s), 0.05);
        assert_eq!(anneal_tau(1000, &s), 0.05);
        assert_eq!(anneal_tau(50, &s), (1.0 + 0.05) / 2.0);
        assert!((anneal_tau(50, &s) - 0.525).abs() < 1e-15);
        let s = AnnealSchedule { tau_start: 1.0, tau_end: 0.3, steps: 8 };
        assert_eq!(anneal_tau(4, &s), 0.65);
        assert!(AnnealSchedule { tau_start: 0.1, tau_end: 0.2, steps: 5 }.validate().is_err());
        assert!(AnnealSchedule { steps: 0, ..s }.validate().is_err());
    }

    proptest! {
        #[test]
        fn anneal_is_non_increasing(start in 0.06f64..5.0, end in 0.01f64..0.06, steps in 1usize..500) {
            let s = AnnealSchedule { tau_start: start, tau_end: end, steps };
            let mut prev = f64::INFINITY;
            for j in 0..steps + 20 {
                let t = anneal_tau(j, &s);
                prop_assert!(t <= prev);
                if j >= steps {
                    prop_assert_eq!(t, end);
                }
                if 2 * j == steps {
                    prop_assert_eq!(t, (start + end) / 2.0);
                }
                prev = t;
            }
        }
    }
}

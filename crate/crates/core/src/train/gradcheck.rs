//! Central-difference verification of the analytic gradients.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{Batch, Family, UniMixerModel};
use crate::train::trainer::{batch_loss, loss_and_grads};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Minimum number of scalars probed; every family gets an equal share first.
    pub samples: usize,
    /// Denominator floor of the relative error, so near-zero gradients are
    /// judged by absolute error instead.
    pub floor: f64,
    pub seed: u64,
    /// Scales the analytic gradient of one family by 1.5 before comparing.
    /// Used to show the check detects a broken backward pass.
    pub corrupt: Option<Family>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { eps: 1e-5, samples: 200, floor: 1e-6, seed: 0, corrupt: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Probes and worst relative error per family.
    pub families: BTreeMap<Family, (usize, f64)>,
    pub worst: Option<Probe>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central difference of `f` along coordinate `k` of `theta`.
pub fn central_difference(theta: &mut [f64], k: usize, eps: f64, f: &mut impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = theta[k];
    theta[k] = orig + eps;
    let plus = f(theta);
    theta[k] = orig - eps;
    let minus = f(theta);
    theta[k] = orig;
    (plus - minus) / (2.0 * eps)
}

fn set_scalar(m: &mut UniMixerModel, param: usize, index: usize, value: f64) {
    let mut k = 0;
    m.visit_params_mut(|_, _, w| {
        if k == param {
            w.data_mut()[index] = value;
        }
        k += 1;
    });
}

/// Compares the backward pass against central differences of the batch BCE
/// at temperature `tau` on a stratified sample of parameters.
pub fn finite_diff_grad_check(
    model: &UniMixerModel,
    batch: &Batch,
    labels: &[f64],
    tau: f64,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let (_, grads) = loss_and_grads(model, batch, labels, tau)?;
    let names = model.param_names();
    let params = model.params();

    let mut by_family: BTreeMap<Family, Vec<(usize, usize)>> = BTreeMap::new();
    for (p, ((_, fam), w)) in names.iter().zip(&params).enumerate() {
        by_family.entry(*fam).or_default().extend((0..w.len()).map(|e| (p, e)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let share = cfg.samples.div_ceil(by_family.len().max(1));
    let mut chosen = Vec::new();
    let mut rest = Vec::new();
    for coords in by_family.values_mut() {
        coords.shuffle(&mut rng);
        let k = share.min(coords.len());
        chosen.extend_from_slice(&coords[..k]);
        rest.extend_from_slice(&coords[k..]);
    }
    if chosen.len() < cfg.samples {
        rest.shuffle(&mut rng);
        let need = (cfg.samples - chosen.len()).min(rest.len());
        chosen.extend_from_slice(&rest[..need]);
    }

    let mut work = model.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, families: BTreeMap::new(), worst: None };
    for (p, e) in chosen {
        let orig = params[p].data()[e];
        let mut loss_at = |v: f64| -> Result<f64> {
            set_scalar(&mut work, p, e, v);
            batch_loss(&work, batch, labels, tau)
        };
        let plus = loss_at(orig + cfg.eps)?;
        let minus = loss_at(orig - cfg.eps)?;
        set_scalar(&mut work, p, e, orig);
        let numeric = (plus - minus) / (2.0 * cfg.eps);

        let (name, fam) = &names[p];
        let mut analytic = grads[p].data()[e];
        if cfg.corrupt == Some(*fam) {
            analytic *= 1.5;
        }
        let err = relative_error(analytic, numeric, cfg.floor);
        let slot = report.families.entry(*fam).or_insert((0, 0.0));
        slot.0 += 1;
        slot.1 = slot.1.max(err);
        report.checked += 1;
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some(Probe { name: name.clone(), index: e, analytic, numeric, rel_error: err });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FieldSpec, ModelConfig, Variant};
    use crate::sinkhorn::ConstraintConfig;
    use crate::tensor::Matrix;
    use rand::Rng;

    #[test]
    fn linear_function_is_exact() {
        let c = [0.5, -2.0, 3.25, 0.75];
        let mut theta = vec![1.0, 2.0, -1.0, 0.3];
        let mut f = |t: &[f64]| t.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>();
        for k in 0..4 {
            let n = central_difference(&mut theta, k, 1e-5, &mut f);
            assert!(relative_error(c[k], n, 1e-6) <= 1e-9);
        }
        assert_eq!(theta, vec![1.0, 2.0, -1.0, 0.3]);
    }

    fn tiny(variant: Variant) -> (UniMixerModel, Batch, Vec<f64>) {
        let cfg = ModelConfig {
            fields: vec![
                FieldSpec::Categorical { name: "a".into(), cardinality: 4, embed_dim: 4 },
                FieldSpec::Dense { name: "b".into(), dim: 4 },
            ],
            chunk: 4,
            token_dim: 4,
            block: 2,
            num_blocks: 1,
            expansion: 2,
            variant,
            rank: 2,
            basis: 2,
            constraint: ConstraintConfig { tau: 1.0, max_iters: 20, tol: 1e-6 },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = UniMixerModel::new(cfg, &mut rng).unwrap();
        m.visit_params_mut(|_, fam, w| {
            if !matches!(fam, Family::SwiGLU | Family::Projection | Family::Head) {
                *w = Matrix::random_normal(w.rows(), w.cols(), 0.5, &mut rng);
            }
        });
        let batch = Batch {
            categorical: vec![vec![0, 3, 1, 2]],
            dense: Matrix::random_normal(4, 4, 1.0, &mut rng),
        };
        let labels = (0..4).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        (m, batch, labels)
    }

    #[test]
    fn every_variant_passes_and_corruption_is_caught() {
        for v in Variant::ALL {
            let (m, batch, labels) = tiny(v);
            let r = finite_diff_grad_check(&m, &batch, &labels, 0.5, &GradCheckConfig::default()).unwrap();
            assert!(r.passes(1e-4), "{v}: {:?}", r.worst);
            assert!(r.checked >= 200 || r.checked == m.params().iter().map(|p| p.len()).sum::<usize>());
        }
        let (m, batch, labels) = tiny(Variant::UniMixing);
        let cfg = GradCheckConfig { corrupt: Some(Family::LocalRaw), ..Default::default() };
        let r = finite_diff_grad_check(&m, &batch, &labels, 0.5, &cfg).unwrap();
        assert!(r.max_rel_error > 1e-2);
        assert!(r.worst.unwrap().name.contains("local_raw"));
    }
}

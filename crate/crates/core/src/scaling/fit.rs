use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Variant;
use crate::scaling::ScalingPoint;

/// Abscissa of a fit: dense parameters or forward FLOPs per sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum XKind {
    Params,
    Flops,
}

impl XKind {
    pub fn name(self) -> &'static str {
        match self {
            XKind::Params => "params",
            XKind::Flops => "flops",
        }
    }
}

impl fmt::Display for XKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for XKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "params" => Ok(XKind::Params),
            "flops" => Ok(XKind::Flops),
            _ => Err(Error::Config(format!("unknown x kind '{s}', expected params or flops"))),
        }
    }
}

/// `auc - baseline_auc = a · x^b` with `x` in millions.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerLawFit {
    pub series: String,
    pub a: f64,
    pub b: f64,
    /// RMSE of the fit in log-log space.
    pub residual: f64,
    pub x_kind: XKind,
    pub x_units: String,
    pub baseline_auc: f64,
    pub points: usize,
}

impl PowerLawFit {
    /// Predicted AUC at `x` (raw units, not millions).
    pub fn predict(&self, x: f64) -> f64 {
        self.baseline_auc + self.a * (x / 1e6).powf(self.b)
    }
}

/// Least squares of `ln y = ln a + b ln x`; returns `(a, b, rmse)`.
pub fn fit_log_log(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64)> {
    if xs.len() != ys.len() {
        return Err(Error::Dimension(format!("{} x values for {} y values", xs.len(), ys.len())));
    }
    if xs.len() < 3 {
        return Err(Error::Precondition(format!("a power-law fit needs at least 3 points, got {}", xs.len())));
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::Precondition("power-law fits need positive finite x and y".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = xs.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Precondition("all points share one x value".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let b = sxy / sxx;
    let ln_a = my - b * mx;
    let sse: f64 = lx.iter().zip(&ly).map(|(x, y)| (y - ln_a - b * x).powi(2)).sum();
    Ok((ln_a.exp(), b, (sse / n).sqrt()))
}

/// Fits the successful points against `x_kind` in millions. Failed points
/// are skipped; any successful point at or below the baseline is an error
/// listing the offending indices of `points`.
pub fn fit_power_law(points: &[ScalingPoint], x_kind: XKind, baseline_auc: f64) -> Result<PowerLawFit> {
    let ok: Vec<usize> = (0..points.len()).filter(|&i| points[i].status.is_ok()).collect();
    let rejected: Vec<usize> = ok.iter().copied().filter(|&i| !(points[i].auc > baseline_auc)).collect();
    if !rejected.is_empty() {
        return Err(Error::RejectedPoints { indices: rejected });
    }
    let xs: Vec<f64> = ok.iter().map(|&i| points[i].x(x_kind) / 1e6).collect();
    let ys: Vec<f64> = ok.iter().map(|&i| points[i].auc - baseline_auc).collect();
    let (a, b, residual) = fit_log_log(&xs, &ys)?;
    let mut variants: Vec<Variant> = ok.iter().map(|&i| points[i].variant).collect();
    variants.dedup();
    let series = match variants.as_slice() {
        [v] => v.to_string(),
        _ => "all".to_string(),
    };
    Ok(PowerLawFit {
        series,
        a,
        b,
        residual,
        x_kind,
        x_units: "millions".into(),
        baseline_auc,
        points: ok.len(),
    })
}

/// One fit per variant present in `points`, in order of first appearance.
pub fn fit_by_variant(points: &[ScalingPoint], x_kind: XKind, baseline_auc: f64) -> Vec<(Variant, Result<PowerLawFit>)> {
    let mut variants: Vec<Variant> = Vec::new();
    for p in points {
        if !variants.contains(&p.variant) {
            variants.push(p.variant);
        }
    }
    variants
        .into_iter()
        .map(|v| {
            let idx: Vec<usize> = (0..points.len()).filter(|&i| points[i].variant == v).collect();
            let sub: Vec<ScalingPoint> = idx.iter().map(|&i| points[i].clone()).collect();
            let fit = fit_power_law(&sub, x_kind, baseline_auc).map_err(|e| match e {
                Error::RejectedPoints { indices } => Error::RejectedPoints { indices: indices.iter().map(|&k| idx[k]).collect() },
                e => e,
            });
            (v, fit)
        })
        .collect()
}

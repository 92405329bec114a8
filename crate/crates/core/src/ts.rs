//! Single-temperature scaling fitted by negative log-likelihood.
//!
//! The NLL is minimized with a golden-section search over log-temperature,
//! which is where the objective is unimodal; the search interval doubles as
//! the clamp range for every temperature this crate produces.

use crate::dataset::DomainDataset;
use crate::error::{Error, Result};
use crate::prob::{confidence, predict, Calibrator, Prediction};
use serde::{Deserialize, Serialize};

/// Bracket tolerance in log-temperature.
const LOG_TOL: f64 = 1e-6;
const MAX_ITERS: usize = 200;

/// Default search interval for fitted temperatures; doubles as the default
/// clamp range for temperatures predicted per sample.
pub const DEFAULT_T_MIN: f64 = 0.05;
pub const DEFAULT_T_MAX: f64 = 50.0;

/// A fitted scaling temperature together with its search interval.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TemperatureModel {
    #[serde(rename = "T")]
    pub temperature: f64,
    pub t_min: f64,
    pub t_max: f64,
    /// NLL at the fitted temperature. NaN on models read back from disk.
    #[serde(skip, default = "f64_nan")]
    pub nll: f64,
    #[serde(skip, default = "default_true")]
    pub converged: bool,
}

fn f64_nan() -> f64 {
    f64::NAN
}

fn default_true() -> bool {
    true
}

impl TemperatureModel {
    /// Scaled prediction: argmax label, confidence at the fitted temperature.
    pub fn apply(&self, logits: &[f64]) -> Result<Prediction> {
        Ok(Prediction {
            label: predict(logits)?,
            confidence: confidence(logits, self.temperature)?,
        })
    }
}

impl Calibrator for TemperatureModel {
    fn calibrate(&self, logits: &[f64], _embedding: &[f64]) -> Result<Prediction> {
        self.apply(logits)
    }
}

fn sample_nll(logits: &[f64], label: usize, temperature: f64) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max) / temperature;
    let mut sum = 0.0;
    for z in logits {
        sum += (z / temperature - max).exp();
    }
    sum.ln() + max - logits[label] / temperature
}

/// Total NLL of the true labels under temperature-scaled softmax.
///
/// Per-sample terms are accumulated in value order, so the result does not
/// depend on how the samples are arranged.
pub fn nll(data: &DomainDataset, temperature: f64) -> Result<f64> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::NonPositiveTemperature(temperature));
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut terms: Vec<f64> = (0..data.len())
        .map(|i| sample_nll(data.logits_row(i), data.label(i), temperature))
        .collect();
    terms.sort_by(f64::total_cmp);
    Ok(terms.iter().sum())
}

/// Fit the scaling temperature on `data` by NLL over `[t_min, t_max]`.
///
/// Golden-section search over log T, bracket tolerance 1e-6, at most 200
/// iterations. The returned temperature is the best of the interior
/// candidate and the two interval endpoints, so monotone objectives land
/// exactly on a bound.
pub fn fit_ts(data: &DomainDataset, t_min: f64, t_max: f64) -> Result<TemperatureModel> {
    if !(t_min.is_finite() && t_max.is_finite() && 0.0 < t_min && t_min < t_max) {
        return Err(Error::InvalidBounds(t_min, t_max));
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let f = |x: f64| nll(data, x.exp()).expect("temperature in bounds");
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (t_min.ln(), t_max.ln());
    let mut x1 = b - inv_phi * (b - a);
    let mut x2 = a + inv_phi * (b - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    let mut iters = 0;
    while b - a > LOG_TOL && iters < MAX_ITERS {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - inv_phi * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + inv_phi * (b - a);
            f2 = f(x2);
        }
        iters += 1;
    }
    let converged = b - a <= LOG_TOL;

    let mid = (0.5 * (a + b)).exp();
    let mut best = (mid.clamp(t_min, t_max), f(0.5 * (a + b)));
    // Ties go to the endpoint: on saturated data the objective can be flat
    // to f64 precision near a bound, and a monotone objective must land
    // exactly on it.
    for t in [t_min, t_max] {
        let v = nll(data, t)?;
        if v <= best.1 {
            best = (t, v);
        }
    }
    Ok(TemperatureModel {
        temperature: best.0,
        t_min,
        t_max,
        nll: best.1,
        converged,
    })
}

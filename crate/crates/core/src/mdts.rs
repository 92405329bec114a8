//! Multi-domain temperature scaling.
//!
//! Fitting runs in two stages: a scaling temperature is fitted per domain by
//! likelihood, then a regressor is trained to map each sample's embedding to
//! its domain's temperature. At prediction time the regressor supplies a
//! per-sample temperature, clamped to a configured range, and confidence is
//! the scaled softmax maximum — so unseen domains get temperatures
//! interpolated from embedding space rather than a single pooled value.

use crate::dataset::MultiDomainDataset;
use crate::error::{Error, Result};
use crate::prob::{confidence, predict, Calibrator, Prediction};
use crate::regress::{self, FittedRegressor, RegressorSpec};
use crate::ts::{self, DEFAULT_T_MAX, DEFAULT_T_MIN};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Knobs for fitting: the per-domain temperature search interval and the
/// clamp applied to per-sample predicted temperatures.
#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub t_min: f64,
    pub t_max: f64,
    pub clamp: (f64, f64),
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            t_min: DEFAULT_T_MIN,
            t_max: DEFAULT_T_MAX,
            clamp: (DEFAULT_T_MIN, DEFAULT_T_MAX),
        }
    }
}

fn check_clamp(clamp: (f64, f64)) -> Result<()> {
    if clamp.0.is_finite() && clamp.1.is_finite() && 0.0 < clamp.0 && clamp.0 < clamp.1 {
        Ok(())
    } else {
        Err(Error::InvalidBounds(clamp.0, clamp.1))
    }
}

/// A fitted multi-domain scaling model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdtsModel {
    num_classes: usize,
    embedding_dim: usize,
    clamp: (f64, f64),
    #[serde(rename = "per_domain_T")]
    per_domain_t: BTreeMap<String, f64>,
    regressor: FittedRegressor,
}

impl MdtsModel {
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn clamp(&self) -> (f64, f64) {
        self.clamp
    }

    /// The per-domain temperatures the regressor was trained against.
    pub fn per_domain_temperatures(&self) -> &BTreeMap<String, f64> {
        &self.per_domain_t
    }

    pub fn regressor(&self) -> &FittedRegressor {
        &self.regressor
    }

    /// Temperature for one sample: regressor output clamped to the model's
    /// range.
    pub fn predict_temperature(&self, embedding: &[f64]) -> Result<f64> {
        Ok(self
            .regressor
            .predict(embedding)?
            .clamp(self.clamp.0, self.clamp.1))
    }
}

impl Calibrator for MdtsModel {
    fn calibrate(&self, logits: &[f64], embedding: &[f64]) -> Result<Prediction> {
        if logits.len() != self.num_classes {
            return Err(Error::DimensionMismatch(format!(
                "{} logits for a {}-class model",
                logits.len(),
                self.num_classes
            )));
        }
        let t = self.predict_temperature(embedding)?;
        Ok(Prediction {
            label: predict(logits)?,
            confidence: confidence(logits, t)?,
        })
    }
}

/// Fit one scaling temperature per domain; keys are domain ids.
pub fn fit_domain_temperatures(
    data: &MultiDomainDataset,
    t_min: f64,
    t_max: f64,
) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for d in data.domains() {
        out.insert(d.id().to_string(), ts::fit_ts(d, t_min, t_max)?.temperature);
    }
    Ok(out)
}

/// Fit a multi-domain scaling model with the given regressor.
pub fn fit_mdts(
    data: &MultiDomainDataset,
    spec: &RegressorSpec,
    opts: FitOptions,
) -> Result<MdtsModel> {
    fit_inner(data, spec, opts, None)
}

/// Like [`fit_mdts`] with per-domain weights on the regression stage. Each
/// domain contributes to the regressor's objective in proportion to its
/// weight, regardless of its sample count.
pub fn fit_mdts_weighted(
    data: &MultiDomainDataset,
    spec: &RegressorSpec,
    opts: FitOptions,
    domain_weights: &BTreeMap<String, f64>,
) -> Result<MdtsModel> {
    for d in data.domains() {
        match domain_weights.get(d.id()) {
            Some(w) if w.is_finite() && *w > 0.0 => {}
            Some(w) => {
                return Err(Error::InvalidData(format!(
                    "weight {w} for domain {} must be positive and finite",
                    d.id()
                )))
            }
            None => return Err(Error::InvalidData(format!("no weight for domain {}", d.id()))),
        }
    }
    fit_inner(data, spec, opts, Some(domain_weights))
}

fn fit_inner(
    data: &MultiDomainDataset,
    spec: &RegressorSpec,
    opts: FitOptions,
    domain_weights: Option<&BTreeMap<String, f64>>,
) -> Result<MdtsModel> {
    check_clamp(opts.clamp)?;
    let per_domain_t = fit_domain_temperatures(data, opts.t_min, opts.t_max)?;
    let total: usize = data.total_samples();
    let mut rows: Vec<&[f64]> = Vec::with_capacity(total);
    let mut targets: Vec<f64> = Vec::with_capacity(total);
    let mut weights: Vec<f64> = Vec::with_capacity(if domain_weights.is_some() { total } else { 0 });
    for d in data.domains() {
        let t = per_domain_t[d.id()];
        let w = domain_weights.map(|m| m[d.id()] / d.len() as f64);
        for i in 0..d.len() {
            rows.push(d.embedding_row(i));
            targets.push(t);
            if let Some(w) = w {
                weights.push(w);
            }
        }
    }
    let regressor = regress::fit_weighted(
        spec,
        &rows,
        &targets,
        domain_weights.map(|_| weights.as_slice()),
    )?;
    Ok(MdtsModel {
        num_classes: data.num_classes(),
        embedding_dim: data.embedding_dim(),
        clamp: opts.clamp,
        per_domain_t,
        regressor,
    })
}

/// Fit after picking the best candidate by leave-one-domain-out search.
/// A single candidate is used as-is (no search, so single-domain data is
/// fine); otherwise at least two domains are required.
pub fn fit_mdts_selected(
    data: &MultiDomainDataset,
    candidates: &[RegressorSpec],
    opts: FitOptions,
    bins: usize,
) -> Result<(MdtsModel, RegressorSpec)> {
    let spec = match candidates {
        [] => return Err(Error::EmptyInput),
        [only] => only.clone(),
        _ => {
            check_clamp(opts.clamp)?;
            let per_domain_t = fit_domain_temperatures(data, opts.t_min, opts.t_max)?;
            regress::select_hyperparams(candidates, data, &per_domain_t, opts.clamp, bins)?
        }
    };
    Ok((fit_mdts(data, &spec, opts)?, spec))
}

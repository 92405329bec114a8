//! Softmax probabilities, argmax prediction and top-label confidence.
//!
//! All scaled quantities shift the logits by their maximum before
//! exponentiation, so inputs of any magnitude stay finite.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// A predicted label together with the confidence reported for it.
///
/// The label is always the argmax of the raw logits; calibration methods
/// only adjust the confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: usize,
    pub confidence: f64,
}

/// A calibration map: sample (logits, embedding) to a labelled confidence.
///
/// Maps that do not depend on the embedding ignore it.
pub trait Calibrator {
    fn calibrate(&self, logits: &[f64], embedding: &[f64]) -> Result<Prediction>;
}

/// Uncalibrated maximum softmax probability.
#[derive(Debug, Clone, Copy, Default)]
pub struct Msp;

impl Calibrator for Msp {
    fn calibrate(&self, logits: &[f64], _embedding: &[f64]) -> Result<Prediction> {
        msp(logits)
    }
}

fn check_temperature(temperature: f64) -> Result<()> {
    if temperature.is_finite() && temperature > 0.0 {
        Ok(())
    } else {
        Err(Error::NonPositiveTemperature(temperature))
    }
}

/// Softmax of `logits / temperature`. Entries are positive and sum to 1.
pub fn softmax_t(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    check_temperature(temperature)?;
    if logits.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scaled.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scaled.iter_mut() {
        *s /= sum;
    }
    Ok(scaled)
}

/// Argmax of the raw logits; ties resolve to the lowest index.
pub fn predict(logits: &[f64]) -> Result<usize> {
    if logits.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut best = 0;
    for (j, z) in logits.iter().enumerate().skip(1) {
        if *z > logits[best] {
            best = j;
        }
    }
    Ok(best)
}

/// Largest entry of the temperature-scaled softmax.
///
/// Equal to `softmax_t(logits, t).max()` bit for bit: the maximum entry is
/// exp(0)/sum, computed here directly without materializing the vector.
pub fn confidence(logits: &[f64], temperature: f64) -> Result<f64> {
    check_temperature(temperature)?;
    if logits.is_empty() {
        return Err(Error::EmptyInput);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max) / temperature;
    let mut sum = 0.0;
    for z in logits {
        sum += (z / temperature - max).exp();
    }
    Ok(1.0 / sum)
}

/// Maximum softmax probability at temperature 1.
pub fn msp(logits: &[f64]) -> Result<Prediction> {
    Ok(Prediction {
        label: predict(logits)?,
        confidence: confidence(logits, 1.0)?,
    })
}

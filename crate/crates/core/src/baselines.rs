//! Confidence recalibration baselines that rescale the top-label score:
//! histogram binning and isotonic regression. Both leave the predicted
//! label untouched and replace the softmax maximum with an estimate of
//! accuracy learned from a calibration set.

use crate::dataset::MultiDomainDataset;
use crate::error::{Error, Result};
use crate::metrics::bin_index;
use crate::prob::{self, Calibrator, Prediction};
use serde::{Deserialize, Serialize};

fn check_scores(confidences: &[f64], correct: &[bool]) -> Result<()> {
    if confidences.is_empty() {
        return Err(Error::EmptyInput);
    }
    if confidences.len() != correct.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} confidences vs {} outcomes",
            confidences.len(),
            correct.len()
        )));
    }
    if let Some(bad) = confidences.iter().find(|c| !(c.is_finite() && (0.0..=1.0).contains(*c))) {
        return Err(Error::InvalidData(format!("confidence {bad} outside [0, 1]")));
    }
    Ok(())
}

/// Collect (top-label confidence, correctness) over every sample, in domain
/// order.
fn pooled_scores(data: &MultiDomainDataset) -> Result<(Vec<f64>, Vec<bool>)> {
    let mut confs = Vec::with_capacity(data.total_samples());
    let mut correct = Vec::with_capacity(data.total_samples());
    for d in data.domains() {
        for i in 0..d.len() {
            let p = prob::msp(d.logits_row(i))?;
            confs.push(p.confidence);
            correct.push(p.label == d.label(i));
        }
    }
    Ok((confs, correct))
}

/// Histogram binning: confidence is replaced by the empirical accuracy of
/// its bin on the calibration set.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistogramBinningModel {
    bins: usize,
    /// Accuracy per bin; bins that received no calibration samples hold the
    /// overall calibration accuracy.
    bin_accuracy: Vec<f64>,
}

impl HistogramBinningModel {
    pub fn fit_scores(confidences: &[f64], correct: &[bool], bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::InvalidBinCount);
        }
        check_scores(confidences, correct)?;
        let mut hits = vec![0.0f64; bins];
        let mut counts = vec![0usize; bins];
        for (c, ok) in confidences.iter().zip(correct) {
            let b = bin_index(*c, bins);
            counts[b] += 1;
            if *ok {
                hits[b] += 1.0;
            }
        }
        let global = correct.iter().filter(|ok| **ok).count() as f64 / correct.len() as f64;
        let bin_accuracy = hits
            .iter()
            .zip(&counts)
            .map(|(h, &n)| if n > 0 { h / n as f64 } else { global })
            .collect();
        Ok(Self { bins, bin_accuracy })
    }

    pub fn fit(data: &MultiDomainDataset, bins: usize) -> Result<Self> {
        let (confs, correct) = pooled_scores(data)?;
        Self::fit_scores(&confs, &correct, bins)
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    /// Recalibrated value for a raw confidence.
    pub fn recalibrate(&self, confidence: f64) -> f64 {
        self.bin_accuracy[bin_index(confidence, self.bins)]
    }
}

impl Calibrator for HistogramBinningModel {
    fn calibrate(&self, logits: &[f64], _embedding: &[f64]) -> Result<Prediction> {
        let p = prob::msp(logits)?;
        Ok(Prediction {
            label: p.label,
            confidence: self.recalibrate(p.confidence),
        })
    }
}

/// Isotonic regression: the best non-decreasing map from confidence to
/// correctness in squared error, fitted by pooling adjacent violators.
/// Prediction is stepwise constant, extended flat beyond either end.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IsotonicModel {
    /// Distinct calibration confidences, ascending.
    thresholds: Vec<f64>,
    /// Fitted value at each threshold; non-decreasing.
    values: Vec<f64>,
}

impl IsotonicModel {
    pub fn fit_scores(confidences: &[f64], correct: &[bool]) -> Result<Self> {
        check_scores(confidences, correct)?;
        let mut order: Vec<usize> = (0..confidences.len()).collect();
        order.sort_by(|&a, &b| confidences[a].total_cmp(&confidences[b]));

        // merge exactly tied confidences up front so a single x carries one
        // block, then pool adjacent violators of monotonicity
        struct Block {
            x: f64,
            sum: f64,
            n: f64,
        }
        let mut blocks: Vec<Block> = Vec::new();
        for &i in &order {
            let y = if correct[i] { 1.0 } else { 0.0 };
            match blocks.last_mut() {
                Some(b) if b.x == confidences[i] => {
                    b.sum += y;
                    b.n += 1.0;
                }
                _ => blocks.push(Block {
                    x: confidences[i],
                    sum: y,
                    n: 1.0,
                }),
            }
        }
        let ties: Vec<(f64, f64, f64)> = blocks.iter().map(|b| (b.x, b.sum, b.n)).collect();

        // PAV over the tie-merged sequence; each pooled block remembers the
        // range of thresholds it covers
        struct Pool {
            first: usize,
            sum: f64,
            n: f64,
        }
        let mut pools: Vec<Pool> = Vec::new();
        for (idx, &(_, sum, n)) in ties.iter().enumerate() {
            pools.push(Pool { first: idx, sum, n });
            while pools.len() >= 2 {
                let last = pools.len() - 1;
                if pools[last - 1].sum / pools[last - 1].n <= pools[last].sum / pools[last].n {
                    break;
                }
                let top = pools.pop().expect("len checked");
                let prev = pools.last_mut().expect("len checked");
                prev.sum += top.sum;
                prev.n += top.n;
            }
        }

        let mut thresholds = Vec::with_capacity(ties.len());
        let mut values = Vec::with_capacity(ties.len());
        let mut p = 0;
        for (idx, &(x, _, _)) in ties.iter().enumerate() {
            while p + 1 < pools.len() && idx >= pools[p + 1].first {
                p += 1;
            }
            thresholds.push(x);
            values.push(pools[p].sum / pools[p].n);
        }
        Ok(Self { thresholds, values })
    }

    pub fn fit(data: &MultiDomainDataset) -> Result<Self> {
        let (confs, correct) = pooled_scores(data)?;
        Self::fit_scores(&confs, &correct)
    }

    /// Fitted value at the greatest threshold not above `confidence`;
    /// queries below the first threshold take the first value.
    pub fn recalibrate(&self, confidence: f64) -> f64 {
        let pos = self.thresholds.partition_point(|t| *t <= confidence);
        self.values[pos.saturating_sub(1)]
    }
}

impl Calibrator for IsotonicModel {
    fn calibrate(&self, logits: &[f64], _embedding: &[f64]) -> Result<Prediction> {
        let p = prob::msp(logits)?;
        Ok(Prediction {
            label: p.label,
            confidence: self.recalibrate(p.confidence),
        })
    }
}

//! Binned calibration error and per-domain evaluation reports.
//!
//! Confidence bins are the half-open intervals ((m-1)/M, m/M] for
//! m = 1..=M; a confidence of exactly 0 falls into the first bin. Empty
//! bins contribute nothing to the error and are emitted with zeroed stats.

use crate::dataset::MultiDomainDataset;
use crate::error::{Error, Result};
use crate::prob::Calibrator;
use serde::Serialize;
use std::fmt::Write as _;

/// Per-bin tallies. `index` is 1-based; `lo`/`hi` are the bin edges.
#[derive(Debug, Clone, PartialEq)]
pub struct BinStats {
    pub index: usize,
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub accuracy: f64,
    pub mean_confidence: f64,
}

/// Calibration error of one sample set, with the full bin table.
#[derive(Debug, Clone)]
pub struct EceReport {
    pub ece: f64,
    pub num_bins: usize,
    pub n: usize,
    pub mean_confidence: f64,
    pub mean_accuracy: f64,
    pub bins: Vec<BinStats>,
}

/// Per-domain and pooled calibration errors for one calibrator.
#[derive(Debug, Clone)]
pub struct MultiDomainReport {
    pub num_bins: usize,
    /// Unweighted mean of the per-domain errors.
    pub mdece: f64,
    pub pooled: EceReport,
    pub per_domain: Vec<(String, EceReport)>,
}

/// 0-based bin for a confidence value. Values at a bin's upper edge belong
/// to that bin; anything at or below 0 goes to the first bin, anything
/// above 1 to the last.
pub fn bin_index(confidence: f64, bins: usize) -> usize {
    if confidence <= 0.0 {
        return 0;
    }
    let m = (confidence * bins as f64).ceil() as usize;
    m.clamp(1, bins) - 1
}

/// Binned calibration error of (confidence, correctness) pairs.
pub fn ece(confidences: &[f64], correct: &[bool], bins: usize) -> Result<EceReport> {
    if bins == 0 {
        return Err(Error::InvalidBinCount);
    }
    if confidences.is_empty() {
        return Err(Error::EmptyInput);
    }
    if confidences.len() != correct.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} confidences vs {} correctness flags",
            confidences.len(),
            correct.len()
        )));
    }
    let mut conf_sum = vec![0.0f64; bins];
    let mut acc_sum = vec![0.0f64; bins];
    let mut count = vec![0usize; bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let m = bin_index(c, bins);
        conf_sum[m] += c;
        acc_sum[m] += ok as u8 as f64;
        count[m] += 1;
    }
    let n = confidences.len() as f64;
    let mut value = 0.0;
    let mut stats = Vec::with_capacity(bins);
    for m in 0..bins {
        let (accuracy, mean_confidence) = if count[m] > 0 {
            (acc_sum[m] / count[m] as f64, conf_sum[m] / count[m] as f64)
        } else {
            (0.0, 0.0)
        };
        if count[m] > 0 {
            value += count[m] as f64 / n * (accuracy - mean_confidence).abs();
        }
        stats.push(BinStats {
            index: m + 1,
            lo: m as f64 / bins as f64,
            hi: (m + 1) as f64 / bins as f64,
            count: count[m],
            accuracy,
            mean_confidence,
        });
    }
    Ok(EceReport {
        ece: value,
        num_bins: bins,
        n: confidences.len(),
        mean_confidence: conf_sum.iter().sum::<f64>() / n,
        mean_accuracy: acc_sum.iter().sum::<f64>() / n,
        bins: stats,
    })
}

/// Unweighted mean of per-domain calibration errors.
pub fn mdece(per_domain: &[(String, EceReport)]) -> Result<f64> {
    if per_domain.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(per_domain.iter().map(|(_, r)| r.ece).sum::<f64>() / per_domain.len() as f64)
}

/// Mean absolute gap between mean confidence and accuracy across domains.
pub fn accuracy_prediction_mae(per_domain: &[(String, EceReport)]) -> Result<f64> {
    if per_domain.is_empty() {
        return Err(Error::EmptyInput);
    }
    let total: f64 = per_domain
        .iter()
        .map(|(_, r)| (r.mean_confidence - r.mean_accuracy).abs())
        .sum();
    Ok(total / per_domain.len() as f64)
}

/// Run a calibrator over every domain and report per-domain and pooled
/// calibration errors. Correctness compares the calibrated label (argmax of
/// the raw logits for every map in this crate) against the true label.
pub fn evaluate(
    calibrator: &dyn Calibrator,
    data: &MultiDomainDataset,
    bins: usize,
) -> Result<MultiDomainReport> {
    if bins == 0 {
        return Err(Error::InvalidBinCount);
    }
    let mut per_domain = Vec::with_capacity(data.num_domains());
    let total = data.total_samples();
    let mut pooled_conf = Vec::with_capacity(total);
    let mut pooled_correct = Vec::with_capacity(total);
    for d in data.domains() {
        let mut confs = Vec::with_capacity(d.len());
        let mut correct = Vec::with_capacity(d.len());
        for i in 0..d.len() {
            let p = calibrator
                .calibrate(d.logits_row(i), d.embedding_row(i))
                .map_err(|e| Error::SampleFailure {
                    domain: d.id().to_string(),
                    row: i,
                    source: Box::new(e),
                })?;
            confs.push(p.confidence);
            correct.push(p.label == d.label(i));
        }
        pooled_conf.extend_from_slice(&confs);
        pooled_correct.extend_from_slice(&correct);
        per_domain.push((d.id().to_string(), ece(&confs, &correct, bins)?));
    }
    Ok(MultiDomainReport {
        num_bins: bins,
        mdece: mdece(&per_domain)?,
        pooled: ece(&pooled_conf, &pooled_correct, bins)?,
        per_domain,
    })
}

/// Reliability table rows, one line per bin: `bin,lo,hi,count,accuracy,confidence`.
pub fn reliability_csv(report: &EceReport) -> String {
    let mut out = String::from("bin,lo,hi,count,accuracy,confidence\n");
    for b in &report.bins {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            b.index, b.lo, b.hi, b.count, b.accuracy, b.mean_confidence
        );
    }
    out
}

#[derive(Serialize)]
struct ReportWire<'a> {
    bins: usize,
    mdece: f64,
    pooled_ece: f64,
    per_domain: Vec<DomainWire<'a>>,
}

#[derive(Serialize)]
struct DomainWire<'a> {
    domain: &'a str,
    ece: f64,
    acc: f64,
    conf: f64,
    n: usize,
}

impl MultiDomainReport {
    pub fn to_json(&self) -> String {
        let wire = ReportWire {
            bins: self.num_bins,
            mdece: self.mdece,
            pooled_ece: self.pooled.ece,
            per_domain: self
                .per_domain
                .iter()
                .map(|(id, r)| DomainWire {
                    domain: id,
                    ece: r.ece,
                    acc: r.mean_accuracy,
                    conf: r.mean_confidence,
                    n: r.n,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&wire).expect("report serializes")
    }
}

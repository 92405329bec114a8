//! Empirical transfer-bound checking over a finite hypothesis family.
//!
//! The family is a grid of temperatures, each inducing the calibration map
//! h_T(x) = max softmax(logits / T), together with a grid of thresholds.
//! Every quantity below is computed by exhaustive enumeration over that
//! finite family, so the divergence, the mixture-weight search and the bound
//! sides are exact for the family at hand — no sampling, no optimization
//! error. Samples at a threshold boundary (|h − h′| equal to t) are *not*
//! in the indicator set; membership is strict.
//!
//! Mixtures of in-distribution domains are never materialized: each domain
//! contributes its per-cell indicator fractions and per-temperature risks
//! once, and any mixture weight combines them linearly.

use crate::dataset::DomainDataset;
use crate::error::{Error, Result};
use crate::prob::{self, Calibrator};
use serde::{Deserialize, Serialize};

/// Largest number of in-distribution domains for which the weight simplex
/// is searched exhaustively.
pub const MAX_MIXTURE_DOMAINS: usize = 4;

/// A finite family: temperature grid (each temperature is one calibration
/// map) and threshold grid for the induced indicator sets.
#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisFamily {
    temperatures: Vec<f64>,
    thresholds: Vec<f64>,
}

impl HypothesisFamily {
    pub fn new(temperatures: Vec<f64>, thresholds: Vec<f64>) -> Result<Self> {
        if temperatures.is_empty() || !temperatures.iter().all(|t| t.is_finite() && *t > 0.0) {
            return Err(Error::InvalidConfig(
                "temperature grid must be nonempty and positive".into(),
            ));
        }
        if thresholds.is_empty()
            || !thresholds.iter().all(|t| t.is_finite() && (0.0..=1.0).contains(t))
        {
            return Err(Error::InvalidConfig(
                "threshold grid must be nonempty within [0, 1]".into(),
            ));
        }
        Ok(Self { temperatures, thresholds })
    }

    /// `g` log-spaced temperatures on [t_min, t_max] and `r` evenly spaced
    /// thresholds on [0, 1].
    pub fn log_spaced(g: usize, t_min: f64, t_max: f64, r: usize) -> Result<Self> {
        if g == 0 || r == 0 {
            return Err(Error::InvalidConfig("grids must be nonempty".into()));
        }
        if !(t_min.is_finite() && t_max.is_finite() && 0.0 < t_min && t_min <= t_max) {
            return Err(Error::InvalidBounds(t_min, t_max));
        }
        let temperatures = (0..g)
            .map(|i| {
                let frac = if g == 1 { 0.0 } else { i as f64 / (g - 1) as f64 };
                (t_min.ln() + frac * (t_max.ln() - t_min.ln())).exp()
            })
            .collect();
        let thresholds = (0..r)
            .map(|i| if r == 1 { 0.0 } else { i as f64 / (r - 1) as f64 })
            .collect();
        Self::new(temperatures, thresholds)
    }

    pub fn temperatures(&self) -> &[f64] {
        &self.temperatures
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    fn cells(&self) -> usize {
        self.temperatures.len() * self.temperatures.len() * self.thresholds.len()
    }

    /// n x G matrix of h_T(x) values, row-major per sample.
    fn conf_matrix(&self, samples: &DomainDataset) -> Result<Vec<f64>> {
        let g = self.temperatures.len();
        let mut out = Vec::with_capacity(samples.len() * g);
        for i in 0..samples.len() {
            for t in &self.temperatures {
                out.push(prob::confidence(samples.logits_row(i), *t)?);
            }
        }
        Ok(out)
    }

    /// Fraction of samples in each indicator set {x : |h(x) − h′(x)| > t},
    /// flattened over (h, h′, t).
    fn cell_fractions(&self, samples: &DomainDataset) -> Result<Vec<f64>> {
        let g = self.temperatures.len();
        let r = self.thresholds.len();
        let confs = self.conf_matrix(samples)?;
        let n = samples.len();
        let mut out = vec![0.0f64; self.cells()];
        for g1 in 0..g {
            for g2 in 0..g {
                let base = (g1 * g + g2) * r;
                for i in 0..n {
                    let diff = (confs[i * g + g1] - confs[i * g + g2]).abs();
                    for (k, t) in self.thresholds.iter().enumerate() {
                        if diff > *t {
                            out[base + k] += 1.0;
                        }
                    }
                }
            }
        }
        for v in &mut out {
            *v /= n as f64;
        }
        Ok(out)
    }

    /// Risk of each grid temperature against the sample set's oracle.
    fn member_risks(&self, samples: &DomainDataset) -> Result<Vec<f64>> {
        let oracle = samples
            .oracle_conf()
            .ok_or_else(|| Error::MissingOracle(samples.id().to_string()))?;
        let n = samples.len();
        let mut out = Vec::with_capacity(self.temperatures.len());
        for t in &self.temperatures {
            let mut sum = 0.0;
            for i in 0..n {
                sum += (oracle[i] - prob::confidence(samples.logits_row(i), *t)?).abs();
            }
            out.push(sum / n as f64);
        }
        Ok(out)
    }
}

/// Nonnegative weights over the in-distribution domains, summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureWeights(Vec<f64>);

impl MixtureWeights {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::EmptyInput);
        }
        if !alpha.iter().all(|a| a.is_finite() && *a >= 0.0) {
            return Err(Error::InvalidData(format!("negative or non-finite weight in {alpha:?}")));
        }
        let sum: f64 = alpha.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidData(format!("weights sum to {sum}, not 1")));
        }
        Ok(Self(alpha))
    }

    /// All weight on domain `index`.
    pub fn vertex(k: usize, index: usize) -> Result<Self> {
        if index >= k {
            return Err(Error::InvalidData(format!("vertex {index} of a {k}-simplex")));
        }
        let mut alpha = vec![0.0; k];
        alpha[index] = 1.0;
        Self::new(alpha)
    }

    pub fn alpha(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl Serialize for MixtureWeights {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.0.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for MixtureWeights {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<f64>::deserialize(deserializer)?;
        MixtureWeights::new(v).map_err(serde::de::Error::custom)
    }
}

/// Both sides of the bound for one (mixture, target) pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DivergenceReport {
    pub d_hbar: f64,
    pub lambda: f64,
    pub alpha: MixtureWeights,
    /// Risk of the checked map on the held-out set.
    pub lhs: f64,
    /// Weighted source risk + d_hbar/2 + lambda + slack.
    pub rhs: f64,
    pub slack: f64,
    pub holds: bool,
}

/// Mean absolute gap between a calibration map's confidence and the oracle
/// confidence.
pub fn risk(h: &dyn Calibrator, samples: &DomainDataset) -> Result<f64> {
    let oracle = samples
        .oracle_conf()
        .ok_or_else(|| Error::MissingOracle(samples.id().to_string()))?;
    let mut sum = 0.0;
    for i in 0..samples.len() {
        let p = h.calibrate(samples.logits_row(i), samples.embedding_row(i))?;
        sum += (oracle[i] - p.confidence).abs();
    }
    Ok(sum / samples.len() as f64)
}

/// Largest gap, over every indicator set the family induces, between the
/// two empirical distributions. Symmetric and within [0, 1].
pub fn h_divergence(
    a: &DomainDataset,
    b: &DomainDataset,
    family: &HypothesisFamily,
) -> Result<f64> {
    let fa = family.cell_fractions(a)?;
    let fb = family.cell_fractions(b)?;
    Ok(max_abs_gap(&fa, &fb))
}

fn max_abs_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Per-domain tables that make any mixture evaluable in O(K) per cell:
/// indicator fractions and per-temperature risks for each source domain and
/// for the target.
struct MixtureTables {
    ind_fractions: Vec<Vec<f64>>,
    ind_risks: Vec<Vec<f64>>,
    ood_fractions: Vec<f64>,
    ood_risks: Vec<f64>,
}

impl MixtureTables {
    fn build(
        ind_domains: &[DomainDataset],
        ood: &DomainDataset,
        family: &HypothesisFamily,
    ) -> Result<Self> {
        let mut ind_fractions = Vec::with_capacity(ind_domains.len());
        let mut ind_risks = Vec::with_capacity(ind_domains.len());
        for d in ind_domains {
            ind_fractions.push(family.cell_fractions(d)?);
            ind_risks.push(family.member_risks(d)?);
        }
        Ok(Self {
            ind_fractions,
            ind_risks,
            ood_fractions: family.cell_fractions(ood)?,
            ood_risks: family.member_risks(ood)?,
        })
    }

    /// (divergence, lambda) at one mixture weight.
    fn objective_parts(&self, alpha: &[f64]) -> (f64, f64) {
        let cells = self.ood_fractions.len();
        let mut d = 0.0f64;
        for c in 0..cells {
            let mut mixed = 0.0;
            for (k, fr) in self.ind_fractions.iter().enumerate() {
                mixed += alpha[k] * fr[c];
            }
            d = d.max((mixed - self.ood_fractions[c]).abs());
        }
        let g = self.ood_risks.len();
        let mut lambda = f64::INFINITY;
        for gi in 0..g {
            let mut joint = self.ood_risks[gi];
            for (k, rk) in self.ind_risks.iter().enumerate() {
                joint += alpha[k] * rk[gi];
            }
            lambda = lambda.min(joint);
        }
        (d, lambda)
    }
}

/// Divergence and lambda for a given mixture of the source domains against
/// the target: d is the family divergence between the alpha-weighted source
/// empirical and the target, lambda the smallest joint risk any family
/// member attains on both.
pub fn alpha_objective(
    ind_domains: &[DomainDataset],
    ood: &DomainDataset,
    family: &HypothesisFamily,
    alpha: &MixtureWeights,
) -> Result<(f64, f64)> {
    if ind_domains.is_empty() {
        return Err(Error::EmptyInput);
    }
    if alpha.len() != ind_domains.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} weights for {} domains",
            alpha.len(),
            ind_domains.len()
        )));
    }
    let tables = MixtureTables::build(ind_domains, ood, family)?;
    Ok(tables.objective_parts(alpha.alpha()))
}

/// Every lattice point {alpha : alpha_k = m_k / resolution, sum = 1} in
/// ascending lexicographic order.
fn simplex_lattice(k: usize, resolution: usize) -> Vec<Vec<f64>> {
    fn rec(out: &mut Vec<Vec<f64>>, current: &mut Vec<usize>, pos: usize, left: usize, res: usize) {
        if pos + 1 == current.len() {
            current[pos] = left;
            out.push(current.iter().map(|&m| m as f64 / res as f64).collect());
            return;
        }
        for m in 0..=left {
            current[pos] = m;
            rec(out, current, pos + 1, left - m, res);
        }
    }
    let mut out = Vec::new();
    rec(&mut out, &mut vec![0; k], 0, resolution, resolution);
    out
}

/// Exhaustive simplex-lattice search for the mixture weight minimizing
/// d/2 + lambda against the target. Ties keep the lexicographically
/// smallest weight vector.
pub fn optimize_alpha(
    ind_domains: &[DomainDataset],
    ood: &DomainDataset,
    family: &HypothesisFamily,
    grid_resolution: usize,
) -> Result<MixtureWeights> {
    let k = ind_domains.len();
    if k == 0 {
        return Err(Error::EmptyInput);
    }
    if k > MAX_MIXTURE_DOMAINS {
        return Err(Error::TooManyDomains { got: k, max: MAX_MIXTURE_DOMAINS });
    }
    if grid_resolution < 2 {
        return Err(Error::InvalidConfig(format!(
            "grid resolution {grid_resolution} must be at least 2"
        )));
    }
    if k == 1 {
        return MixtureWeights::new(vec![1.0]);
    }
    let tables = MixtureTables::build(ind_domains, ood, family)?;
    let mut best: Option<(f64, Vec<f64>)> = None;
    for alpha in simplex_lattice(k, grid_resolution) {
        let (d, lambda) = tables.objective_parts(&alpha);
        let obj = 0.5 * d + lambda;
        if best.as_ref().map_or(true, |(b, _)| obj < *b) {
            best = Some((obj, alpha));
        }
    }
    MixtureWeights::new(best.expect("lattice is nonempty").1)
}

/// Evaluate both sides of the bound for a fitted calibration map: the
/// held-out risk on the left, the alpha-weighted source risk plus half the
/// divergence plus lambda plus the slack on the right.
pub fn check_bound(
    ind_domains: &[DomainDataset],
    ood: &DomainDataset,
    hhat: &dyn Calibrator,
    family: &HypothesisFamily,
    alpha: &MixtureWeights,
    slack: f64,
) -> Result<DivergenceReport> {
    if !(slack.is_finite() && slack >= 0.0) {
        return Err(Error::InvalidConfig(format!("slack {slack} must be nonnegative")));
    }
    let (d_hbar, lambda) = alpha_objective(ind_domains, ood, family, alpha)?;
    let lhs = risk(hhat, ood)?;
    let mut weighted_source = 0.0;
    for (k, dset) in ind_domains.iter().enumerate() {
        weighted_source += alpha.alpha()[k] * risk(hhat, dset)?;
    }
    let rhs = weighted_source + 0.5 * d_hbar + lambda + slack;
    Ok(DivergenceReport {
        d_hbar,
        lambda,
        alpha: alpha.clone(),
        lhs,
        rhs,
        slack,
        holds: lhs <= rhs,
    })
}

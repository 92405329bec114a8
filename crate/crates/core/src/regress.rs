//! Regressors mapping feature embeddings to scaling temperatures.
//!
//! Linear kinds (ols, ridge, huber) optionally carry an intercept,
//! implemented as an appended constant-1 column that the ridge and Huber
//! penalties never touch. OLS returns the minimum-norm least-squares
//! solution, so rank-deficient designs are handled without special cases.
//! The nearest-neighbor kind ranks neighbors by Euclidean distance over
//! per-coordinate standardized features (training-set deviations; constant
//! coordinates are left unscaled), so a few large-scale nuisance
//! coordinates cannot drown an informative one. Hyperparameters are picked
//! by leave-one-domain-out search scored with the mean held-out-domain
//! calibration error.

use crate::dataset::MultiDomainDataset;
use crate::error::{Error, Result};
use crate::metrics;
use crate::prob;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

const HUBER_WEIGHT_TOL: f64 = 1e-8;
const HUBER_MAX_ITERS: usize = 100;

/// Kernel ridge solves are cubic in the training count; fits beyond this
/// many samples use an evenly strided subsample as support set. 1000 keeps
/// a full leave-one-domain-out grid search on a ~10k-sample calibration set
/// around a minute on one core.
const KRR_MAX_TRAIN: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegressorKind {
    Ols,
    Ridge,
    Huber,
    Krr,
    Knn,
}

impl RegressorKind {
    pub const ALL: [RegressorKind; 5] = [
        RegressorKind::Ols,
        RegressorKind::Ridge,
        RegressorKind::Huber,
        RegressorKind::Krr,
        RegressorKind::Knn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RegressorKind::Ols => "ols",
            RegressorKind::Ridge => "ridge",
            RegressorKind::Huber => "huber",
            RegressorKind::Krr => "krr",
            RegressorKind::Knn => "knn",
        }
    }
}

/// A regressor kind plus its hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub enum RegressorSpec {
    Ols { intercept: bool },
    Ridge { lambda: f64, intercept: bool },
    Huber { delta: f64, alpha: f64, intercept: bool },
    Krr { gamma: f64, lambda: f64 },
    Knn { k: usize },
}

impl RegressorSpec {
    pub fn ols() -> Self {
        Self::Ols { intercept: true }
    }

    pub fn ridge(lambda: f64) -> Self {
        Self::Ridge { lambda, intercept: true }
    }

    pub fn huber(delta: f64, alpha: f64) -> Self {
        Self::Huber { delta, alpha, intercept: true }
    }

    pub fn krr(gamma: f64, lambda: f64) -> Self {
        Self::Krr { gamma, lambda }
    }

    pub fn knn(k: usize) -> Self {
        Self::Knn { k }
    }

    /// Toggle the intercept; no effect on the nonparametric kinds.
    pub fn with_intercept(self, on: bool) -> Self {
        match self {
            Self::Ols { .. } => Self::Ols { intercept: on },
            Self::Ridge { lambda, .. } => Self::Ridge { lambda, intercept: on },
            Self::Huber { delta, alpha, .. } => Self::Huber { delta, alpha, intercept: on },
            other => other,
        }
    }

    pub fn kind(&self) -> RegressorKind {
        match self {
            Self::Ols { .. } => RegressorKind::Ols,
            Self::Ridge { .. } => RegressorKind::Ridge,
            Self::Huber { .. } => RegressorKind::Huber,
            Self::Krr { .. } => RegressorKind::Krr,
            Self::Knn { .. } => RegressorKind::Knn,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Self::Ols { .. } => true,
            Self::Ridge { lambda, .. } => lambda.is_finite() && lambda >= 0.0,
            Self::Huber { delta, alpha, .. } => {
                delta.is_finite() && delta > 0.0 && alpha.is_finite() && alpha >= 0.0
            }
            Self::Krr { gamma, lambda } => {
                gamma.is_finite() && gamma > 0.0 && lambda.is_finite() && lambda > 0.0
            }
            Self::Knn { k } => k >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidSpec(format!("{self:?}")))
        }
    }

}

/// Default hyperparameter grids, in search order.
pub fn default_grid(kind: RegressorKind, intercept: bool) -> Vec<RegressorSpec> {
    match kind {
        RegressorKind::Ols => vec![RegressorSpec::ols().with_intercept(intercept)],
        RegressorKind::Ridge => [1e-4, 1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2]
            .iter()
            .map(|&l| RegressorSpec::ridge(l).with_intercept(intercept))
            .collect(),
        RegressorKind::Huber => {
            let mut out = Vec::new();
            for &delta in &[1.0, 1.35, 2.0] {
                for &alpha in &[0.0, 1e-3, 1e-1] {
                    out.push(RegressorSpec::huber(delta, alpha).with_intercept(intercept));
                }
            }
            out
        }
        RegressorKind::Krr => {
            let mut out = Vec::new();
            for &gamma in &[1e-3, 1e-2, 1e-1, 1.0, 10.0] {
                for &lambda in &[1e-4, 1e-3, 1e-2, 1e-1, 1.0] {
                    out.push(RegressorSpec::krr(gamma, lambda));
                }
            }
            out
        }
        RegressorKind::Knn => {
            [1usize, 3, 5, 10, 20, 50].iter().map(|&k| RegressorSpec::knn(k)).collect()
        }
    }
}

#[derive(Debug, Clone)]
enum Params {
    Linear { theta: Vec<f64>, intercept: f64 },
    Krr { support: Vec<f64>, dual: Vec<f64>, gamma: f64 },
    /// `std` holds each coordinate's training standard deviation; distances
    /// divide coordinate differences by it (zero entries divide by one).
    Knn { support: Vec<f64>, targets: Vec<f64>, k: usize, std: Vec<f64> },
}

/// A fitted regressor; holds exactly what prediction needs.
#[derive(Debug, Clone)]
pub struct FittedRegressor {
    kind: RegressorKind,
    dim: usize,
    params: Params,
}

impl FittedRegressor {
    pub fn kind(&self) -> RegressorKind {
        self.kind
    }

    pub fn input_dim(&self) -> usize {
        self.dim
    }

    /// Coefficients of a linear fit: (theta, intercept). None for krr/knn.
    pub fn linear_coefficients(&self) -> Option<(&[f64], f64)> {
        match &self.params {
            Params::Linear { theta, intercept } => Some((theta, *intercept)),
            _ => None,
        }
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "input has {} features, regressor expects {}",
                x.len(),
                self.dim
            )));
        }
        Ok(match &self.params {
            Params::Linear { theta, intercept } => {
                theta.iter().zip(x).map(|(t, v)| t * v).sum::<f64>() + intercept
            }
            Params::Krr { support, dual, gamma } => {
                let mut acc = 0.0;
                for (j, a) in dual.iter().enumerate() {
                    let s = &support[j * self.dim..(j + 1) * self.dim];
                    acc += a * (-gamma * sqdist(x, s)).exp();
                }
                acc
            }
            Params::Knn { support, targets, k, std } => {
                let inv: Vec<f64> =
                    std.iter().map(|s| if *s > 0.0 { 1.0 / s } else { 1.0 }).collect();
                let n = targets.len();
                let mut order: Vec<(f64, usize)> = (0..n)
                    .map(|j| {
                        (scaled_sqdist(x, &support[j * self.dim..(j + 1) * self.dim], &inv), j)
                    })
                    .collect();
                let k_eff = (*k).min(n);
                let cmp = |a: &(f64, usize), b: &(f64, usize)| {
                    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
                };
                if k_eff < n {
                    order.select_nth_unstable_by(k_eff - 1, cmp);
                }
                order[..k_eff].iter().map(|&(_, j)| targets[j]).sum::<f64>() / k_eff as f64
            }
        })
    }
}

fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn scaled_sqdist(a: &[f64], b: &[f64], inv: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(inv)
        .map(|((x, y), w)| {
            let d = (x - y) * w;
            d * d
        })
        .sum()
}

/// Per-coordinate population standard deviation of the rows.
fn column_std(rows: &[&[f64]], dim: usize) -> Vec<f64> {
    let n = rows.len() as f64;
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (c, v) in r.iter().enumerate() {
            mean[c] += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0.0; dim];
    for r in rows {
        for (c, v) in r.iter().enumerate() {
            var[c] += (v - mean[c]) * (v - mean[c]);
        }
    }
    var.iter().map(|v| (v / n).sqrt()).collect()
}

/// Fit a regressor to (row, target) pairs.
pub fn fit(spec: &RegressorSpec, rows: &[&[f64]], targets: &[f64]) -> Result<FittedRegressor> {
    fit_weighted(spec, rows, targets, None)
}

/// Like [`fit`], with per-sample weights on the squared-error objective.
/// Weighted fits are supported for the linear kinds and krr; knn has no
/// weighted form and rejects weights.
pub fn fit_weighted(
    spec: &RegressorSpec,
    rows: &[&[f64]],
    targets: &[f64],
    weights: Option<&[f64]>,
) -> Result<FittedRegressor> {
    spec.validate()?;
    let n = rows.len();
    if n == 0 {
        return Err(Error::EmptyTrainingSet);
    }
    if targets.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{n} rows vs {} targets",
            targets.len()
        )));
    }
    let dim = rows[0].len();
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::DimensionMismatch("rows of unequal width".into()));
    }
    if !rows.iter().flat_map(|r| r.iter()).chain(targets).all(|v| v.is_finite()) {
        return Err(Error::SingularSystem("non-finite training values".into()));
    }
    if let Some(w) = weights {
        if w.len() != n {
            return Err(Error::DimensionMismatch(format!("{n} rows vs {} weights", w.len())));
        }
        if !w.iter().all(|v| v.is_finite() && *v > 0.0) {
            return Err(Error::InvalidData("weights must be positive and finite".into()));
        }
    }

    let params = match *spec {
        RegressorSpec::Ols { intercept } => {
            let (a, y) = design(rows, targets, intercept, weights);
            split_linear(min_norm_solve(&a, &y)?, dim, intercept)
        }
        RegressorSpec::Ridge { lambda, intercept } => {
            let (a, y) = design(rows, targets, intercept, weights);
            split_linear(penalized_solve(&a, &y, lambda, dim)?, dim, intercept)
        }
        RegressorSpec::Huber { delta, alpha, intercept } => {
            fit_huber(rows, targets, weights, delta, alpha, intercept, dim)?
        }
        RegressorSpec::Krr { gamma, lambda } => fit_krr(rows, targets, weights, gamma, lambda, dim)?,
        RegressorSpec::Knn { k } => {
            if weights.is_some() {
                return Err(Error::InvalidSpec("knn has no weighted form".into()));
            }
            let mut support = Vec::with_capacity(n * dim);
            for r in rows {
                support.extend_from_slice(r);
            }
            Params::Knn { support, targets: targets.to_vec(), k, std: column_std(rows, dim) }
        }
    };
    Ok(FittedRegressor {
        kind: spec.kind(),
        dim,
        params,
    })
}

/// Design matrix with optional constant-1 column, rows scaled by sqrt(w).
fn design(
    rows: &[&[f64]],
    targets: &[f64],
    intercept: bool,
    weights: Option<&[f64]>,
) -> (DMatrix<f64>, DVector<f64>) {
    let n = rows.len();
    let cols = rows[0].len() + intercept as usize;
    let mut a = DMatrix::zeros(n, cols);
    let mut y = DVector::zeros(n);
    for (i, r) in rows.iter().enumerate() {
        let s = weights.map_or(1.0, |w| w[i].sqrt());
        for (j, v) in r.iter().enumerate() {
            a[(i, j)] = s * v;
        }
        if intercept {
            a[(i, cols - 1)] = s;
        }
        y[i] = s * targets[i];
    }
    (a, y)
}

fn split_linear(coef: DVector<f64>, dim: usize, intercept: bool) -> Params {
    let theta: Vec<f64> = coef.iter().take(dim).copied().collect();
    let b = if intercept { coef[dim] } else { 0.0 };
    Params::Linear { theta, intercept: b }
}

/// Minimum-norm least-squares solution via SVD with a pinv-style cutoff.
fn min_norm_solve(a: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let svd = a.clone().svd(true, true);
    let cutoff = svd.singular_values.max() * a.nrows().max(a.ncols()) as f64 * f64::EPSILON;
    svd.solve(y, cutoff)
        .map(|m| m.column(0).into_owned())
        .map_err(|e| Error::SingularSystem(e.into()))
}

/// Solve (A'A + lambda*D) x = A'y where D penalizes only the first `dim`
/// coordinates, leaving any intercept column free. Falls back to the
/// minimum-norm solution when the normal matrix is not positive definite.
fn penalized_solve(
    a: &DMatrix<f64>,
    y: &DVector<f64>,
    lambda: f64,
    dim: usize,
) -> Result<DVector<f64>> {
    let mut ata = a.transpose() * a;
    for j in 0..dim.min(ata.nrows()) {
        ata[(j, j)] += lambda;
    }
    let aty = a.transpose() * y;
    if let Some(ch) = nalgebra::Cholesky::new(ata.clone()) {
        return Ok(ch.solve(&aty));
    }
    min_norm_solve(&ata, &aty)
}

fn fit_huber(
    rows: &[&[f64]],
    targets: &[f64],
    weights: Option<&[f64]>,
    delta: f64,
    alpha: f64,
    intercept: bool,
    dim: usize,
) -> Result<Params> {
    let n = rows.len();
    let (a, y) = design(rows, targets, intercept, weights);
    let mut coef = penalized_solve(&a, &y, alpha, dim)?;
    let mut irls_w = vec![1.0f64; n];
    for _ in 0..HUBER_MAX_ITERS {
        let resid = &y - &a * &coef;
        let mut max_change = 0.0f64;
        for i in 0..n {
            let r = resid[i].abs();
            let w = if r <= delta { 1.0 } else { delta / r };
            max_change = max_change.max((w - irls_w[i]).abs());
            irls_w[i] = w;
        }
        if max_change < HUBER_WEIGHT_TOL {
            break;
        }
        let mut aw = a.clone();
        let mut yw = y.clone();
        for i in 0..n {
            let s = irls_w[i].sqrt();
            for j in 0..aw.ncols() {
                aw[(i, j)] *= s;
            }
            yw[i] *= s;
        }
        coef = penalized_solve(&aw, &yw, alpha, dim)?;
    }
    Ok(split_linear(coef, dim, intercept))
}

fn fit_krr(
    rows: &[&[f64]],
    targets: &[f64],
    weights: Option<&[f64]>,
    gamma: f64,
    lambda: f64,
    dim: usize,
) -> Result<Params> {
    let n = rows.len();
    // Evenly strided subsample keeps the fit cubic in KRR_MAX_TRAIN, not n.
    let m = n.min(KRR_MAX_TRAIN);
    let picked: Vec<usize> = (0..m).map(|j| j * n / m).collect();
    let mut support = Vec::with_capacity(m * dim);
    let mut t = DVector::zeros(m);
    for (out, &j) in picked.iter().enumerate() {
        support.extend_from_slice(rows[j]);
        t[out] = targets[j];
    }
    let mut kernel = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in i..m {
            let v = (-gamma * sqdist(&support[i * dim..(i + 1) * dim], &support[j * dim..(j + 1) * dim]))
                .exp();
            kernel[(i, j)] = v;
            kernel[(j, i)] = v;
        }
    }
    let dual = match weights {
        None => {
            let mut lhs = kernel;
            for i in 0..m {
                lhs[(i, i)] += lambda;
            }
            match nalgebra::Cholesky::new(lhs.clone()) {
                Some(ch) => ch.solve(&t),
                None => min_norm_solve(&lhs, &t)?,
            }
        }
        Some(w) => {
            // weighted objective: (W K + lambda I) a = W t
            let mut lhs = kernel;
            let mut rhs = t;
            for i in 0..m {
                let wi = w[picked[i]];
                for j in 0..m {
                    lhs[(i, j)] *= wi;
                }
                lhs[(i, i)] += lambda;
                rhs[i] *= wi;
            }
            lhs.clone()
                .lu()
                .solve(&rhs)
                .map_or_else(|| min_norm_solve(&lhs, &rhs), Ok)?
        }
    };
    Ok(Params::Krr {
        support,
        dual: dual.iter().copied().collect(),
        gamma,
    })
}

/// Pick the grid candidate whose leave-one-domain-out calibration error is
/// lowest. Each fold fits on the remaining domains' (embedding, temperature)
/// pairs and scores the held-out domain's calibration error with predicted
/// temperatures clamped to `clamp`. Ties keep the earliest candidate.
pub fn select_hyperparams(
    candidates: &[RegressorSpec],
    calibration: &MultiDomainDataset,
    per_domain_t: &BTreeMap<String, f64>,
    clamp: (f64, f64),
    bins: usize,
) -> Result<RegressorSpec> {
    if candidates.is_empty() {
        return Err(Error::EmptyInput);
    }
    let domains = calibration.domains();
    if domains.len() < 2 {
        return Err(Error::TooFewDomains { got: domains.len(), min: 2 });
    }
    if !(clamp.0.is_finite() && clamp.1.is_finite() && 0.0 < clamp.0 && clamp.0 < clamp.1) {
        return Err(Error::InvalidBounds(clamp.0, clamp.1));
    }
    for d in domains {
        if !per_domain_t.contains_key(d.id()) {
            return Err(Error::InvalidData(format!("no temperature for domain {}", d.id())));
        }
    }

    let mut best: Option<(f64, &RegressorSpec)> = None;
    for spec in candidates {
        let mut fold_sum = 0.0;
        for held in 0..domains.len() {
            let mut rows: Vec<&[f64]> = Vec::new();
            let mut targets: Vec<f64> = Vec::new();
            for (k, d) in domains.iter().enumerate() {
                if k == held {
                    continue;
                }
                let t = per_domain_t[d.id()];
                for i in 0..d.len() {
                    rows.push(d.embedding_row(i));
                    targets.push(t);
                }
            }
            let model = fit(spec, &rows, &targets)?;
            let d = &domains[held];
            let mut confs = Vec::with_capacity(d.len());
            let mut correct = Vec::with_capacity(d.len());
            for i in 0..d.len() {
                let t = model.predict(d.embedding_row(i))?.clamp(clamp.0, clamp.1);
                confs.push(prob::confidence(d.logits_row(i), t)?);
                correct.push(prob::predict(d.logits_row(i))? == d.label(i));
            }
            fold_sum += metrics::ece(&confs, &correct, bins)?.ece;
        }
        let score = fold_sum / domains.len() as f64;
        if best.map_or(true, |(s, _)| score < s) {
            best = Some((score, spec));
        }
    }
    Ok(best.expect("candidates checked non-empty").1.clone())
}

// Wire form of a fitted regressor; field layout is part of the model file
// format.
#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum Wire {
    Ols {
        theta: Vec<f64>,
        intercept: f64,
    },
    Ridge {
        theta: Vec<f64>,
        intercept: f64,
    },
    Huber {
        theta: Vec<f64>,
        intercept: f64,
    },
    Krr {
        support: Vec<Vec<f64>>,
        dual: Vec<f64>,
        gamma: f64,
    },
    Knn {
        support: Vec<Vec<f64>>,
        targets: Vec<f64>,
        k: usize,
        std: Vec<f64>,
    },
}

fn to_nested(flat: &[f64], dim: usize) -> Vec<Vec<f64>> {
    flat.chunks(dim).map(|c| c.to_vec()).collect()
}

impl Serialize for FittedRegressor {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let wire = match (&self.params, self.kind) {
            (Params::Linear { theta, intercept }, RegressorKind::Ols) => Wire::Ols {
                theta: theta.clone(),
                intercept: *intercept,
            },
            (Params::Linear { theta, intercept }, RegressorKind::Ridge) => Wire::Ridge {
                theta: theta.clone(),
                intercept: *intercept,
            },
            (Params::Linear { theta, intercept }, RegressorKind::Huber) => Wire::Huber {
                theta: theta.clone(),
                intercept: *intercept,
            },
            (Params::Krr { support, dual, gamma }, _) => Wire::Krr {
                support: to_nested(support, self.dim),
                dual: dual.clone(),
                gamma: *gamma,
            },
            (Params::Knn { support, targets, k, std }, _) => Wire::Knn {
                support: to_nested(support, self.dim),
                targets: targets.clone(),
                k: *k,
                std: std.clone(),
            },
            _ => unreachable!("params always match kind"),
        };
        wire.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for FittedRegressor {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let wire = Wire::deserialize(deserializer)?;
        let flat = |nested: Vec<Vec<f64>>| -> std::result::Result<(Vec<f64>, usize), D::Error> {
            let dim = nested.first().map(|r| r.len()).unwrap_or(0);
            if nested.iter().any(|r| r.len() != dim) {
                return Err(D::Error::custom("support rows of unequal width"));
            }
            Ok((nested.into_iter().flatten().collect(), dim))
        };
        Ok(match wire {
            Wire::Ols { theta, intercept } => FittedRegressor {
                kind: RegressorKind::Ols,
                dim: theta.len(),
                params: Params::Linear { theta, intercept },
            },
            Wire::Ridge { theta, intercept } => FittedRegressor {
                kind: RegressorKind::Ridge,
                dim: theta.len(),
                params: Params::Linear { theta, intercept },
            },
            Wire::Huber { theta, intercept } => FittedRegressor {
                kind: RegressorKind::Huber,
                dim: theta.len(),
                params: Params::Linear { theta, intercept },
            },
            Wire::Krr { support, dual, gamma } => {
                if support.len() != dual.len() {
                    return Err(D::Error::custom("krr support and dual lengths differ"));
                }
                let (support, dim) = flat(support)?;
                FittedRegressor {
                    kind: RegressorKind::Krr,
                    dim,
                    params: Params::Krr { support, dual, gamma },
                }
            }
            Wire::Knn { support, targets, k, std } => {
                if support.len() != targets.len() || k == 0 {
                    return Err(D::Error::custom("malformed knn model"));
                }
                let (support, dim) = flat(support)?;
                if std.len() != dim || !std.iter().all(|s| s.is_finite() && *s >= 0.0) {
                    return Err(D::Error::custom("malformed knn model"));
                }
                FittedRegressor {
                    kind: RegressorKind::Knn,
                    dim,
                    params: Params::Knn { support, targets, k, std },
                }
            }
        })
    }
}

//! Shared fixtures and independent oracles for the acceptance suite.

use std::collections::BTreeMap;
use std::sync::LazyLock;

use mdts_core::dataset::{DomainDataset, MultiDomainDataset, Split};
use mdts_core::synth::{self, EmbeddingKind, SynthConfig};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Grid size named by the equivalence criterion for the scaling optimizer.
pub const GRID_POINTS: usize = 100_000;

/// Mean negative log-likelihood of the scaled softmax, written directly from
/// the definition as an independent check on the library's objective.
pub fn oracle_nll(data: &DomainDataset, t: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..data.len() {
        let row = data.logits_row(i);
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b / t));
        let lse = m + row.iter().map(|&z| (z / t - m).exp()).sum::<f64>().ln();
        total += lse - row[data.label(i)] / t;
    }
    total / data.len() as f64
}

fn grid_point(i: usize, points: usize, t_min: f64, t_max: f64) -> f64 {
    let f = i as f64 / (points - 1) as f64;
    (t_min.ln() + f * (t_max.ln() - t_min.ln())).exp()
}

/// First minimum of `oracle_nll` over the log-spaced grid, found by scanning
/// a coarse stride and then every grid point in a window around the coarse
/// winner. The objective is convex in inverse temperature and therefore
/// unimodal along the grid, so the window contains the full scan's argmin;
/// `naive_grid_temperature` cross-checks the equivalence on smaller
/// instances before this stands in for it.
pub fn grid_temperature(data: &DomainDataset, t_min: f64, t_max: f64, points: usize) -> f64 {
    let stride = (points / 400).max(1);
    let mut best = (f64::INFINITY, 0usize);
    let mut i = 0;
    while i < points {
        let v = oracle_nll(data, grid_point(i, points, t_min, t_max));
        if v < best.0 {
            best = (v, i);
        }
        i += stride;
    }
    let lo = best.1.saturating_sub(2 * stride);
    let hi = (best.1 + 2 * stride).min(points - 1);
    let mut win = (f64::INFINITY, lo);
    for i in lo..=hi {
        let v = oracle_nll(data, grid_point(i, points, t_min, t_max));
        if v < win.0 {
            win = (v, i);
        }
    }
    grid_point(win.1, points, t_min, t_max)
}

/// Full scan over the same grid; slower but assumption-free.
pub fn naive_grid_temperature(data: &DomainDataset, t_min: f64, t_max: f64, points: usize) -> f64 {
    let mut best = (f64::INFINITY, 0usize);
    for i in 0..points {
        let v = oracle_nll(data, grid_point(i, points, t_min, t_max));
        if v < best.0 {
            best = (v, i);
        }
    }
    grid_point(best.1, points, t_min, t_max)
}

/// An instance with i.i.d. N(0, 4) logits and uniformly random labels.
pub fn random_label_domain(rng: &mut ChaCha8Rng, n: usize, j: usize) -> DomainDataset {
    let logits: Vec<f64> = (0..n * j)
        .map(|_| 2.0 * rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..j)).collect();
    DomainDataset::new("random", Split::Ind, j, 1, labels, logits, vec![0.0; n], None).unwrap()
}

/// The headline benchmark: 10 source domains and 5 held-out domains of
/// 2000 samples each, 10 classes, direct embeddings, generator seed 0,
/// split-half seed 0. Fits use `cal`, in-distribution scores use `eval`,
/// held-out scores use `ood`.
///
/// Pilot run recorded for this exact fixture (20 bins):
///   per-sample map (ols)  source mdece 0.047117, held-out mdece 0.029748
///   pooled single T       source mdece 0.125583, held-out mdece 0.166880
///   oracle floor          source mdece 0.043282, held-out mdece 0.030953
///   worst per-domain temperature recovery 5.63% of the scale factor
/// The acceptance thresholds were frozen against these values.
pub struct Headline {
    pub scales: BTreeMap<String, f64>,
    pub cal: MultiDomainDataset,
    pub eval: MultiDomainDataset,
    pub ood: MultiDomainDataset,
}

/// Bin count shared by every headline score.
pub const HEADLINE_BINS: usize = 20;

pub static HEADLINE: LazyLock<Headline> = LazyLock::new(|| {
    let config = SynthConfig {
        num_domains: 10,
        ood_domains: 5,
        samples_per_domain: 2000,
        num_classes: 10,
        embedding: EmbeddingKind::Direct,
        scale_range: (0.5, 3.0),
        logit_std: 2.0,
        noise_std: 0.05,
        seed: 0,
    };
    let (data, scales) = synth::generate(&config).unwrap();
    let halves = data.filter_split(Split::Ind).unwrap().split_half(0).unwrap();
    let ood = data.filter_split(Split::Ood).unwrap();
    Headline { scales, cal: halves.calibration, eval: halves.evaluation, ood }
});
